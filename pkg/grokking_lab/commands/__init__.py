from grokking_lab.commands import analyze, sim, sweeps, train, verify

COMMAND_GROUPS = (sim, train, sweeps, analyze, verify)
