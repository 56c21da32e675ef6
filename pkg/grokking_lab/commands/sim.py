import argparse
import logging

from grokking_lab.commands.common import emit_csv
from grokking_lab.services.minimal_model import PRESETS, resolve_sim_config, simulate

logger = logging.getLogger(__name__)

OVERRIDE_FIELDS = ("pi_g", "pi_m", "k", "weight_decay", "q", "lr", "w_g1_0", "w_g2_0", "w_m1_0", "w_m2_0")


def register(subparsers) -> None:
    parser = subparsers.add_parser("sim", help="simulate the two-circuit minimal model")
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--pi-g", dest="pi_g", type=float)
    parser.add_argument("--pi-m", dest="pi_m", type=float)
    parser.add_argument("--k", type=float)
    parser.add_argument("--lambda", dest="weight_decay", type=float)
    parser.add_argument("--q", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--w-g1-0", dest="w_g1_0", type=float)
    parser.add_argument("--w-g2-0", dest="w_g2_0", type=float)
    parser.add_argument("--w-m1-0", dest="w_m1_0", type=float)
    parser.add_argument("--w-m2-0", dest="w_m2_0", type=float)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--record-every", type=int)
    parser.add_argument("--out", help="CSV path (stdout when omitted)")
    parser.set_defaults(handler=run_minimal_sim)


def run_minimal_sim(args: argparse.Namespace) -> int:
    overrides = {name: getattr(args, name) for name in OVERRIDE_FIELDS + ("steps",)}
    cfg = resolve_sim_config(args.preset, overrides)
    trace = simulate(cfg, record_every=args.record_every)
    if trace.diverged:
        logger.warning("Simulation diverged; the trace is truncated")
    emit_csv(trace.to_frame(), args.out)
    last = trace.rows[-1]
    logger.info(f"Simulated {last.step} steps: l_train={last.l_train:.4f} l_test={last.l_test:.4f} "
                f"w_g={last.w_g:.4f} w_m={last.w_m:.4f}")
    return 0
