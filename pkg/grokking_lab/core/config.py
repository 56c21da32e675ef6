from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # App
    APP_NAME: str = "Grokking Efficiency Lab"
    ENVIRONMENT: str = "development"

    # Logging
    LOG_DIR: str = "logs"
    LOG_FILE: str = "lab.log"
    LOG_LEVEL: str = ""  # empty = DEBUG in development, INFO otherwise

    # Outputs
    OUTPUT_ROOT: str = "runs"

    # Sweep worker pool
    WORKERS: int = 1

    # Task
    DEFAULT_MODULUS: int = 113

    # Epoch budgets (desk scale)
    GROK_EPOCHS: int = 50_000
    MEM_EPOCHS: int = 20_000
    UNGROK_EPOCHS: int = 100_000
    SEMIGROK_EPOCHS: int = 20_000

    # Training loop cadence
    EVAL_EVERY: int = 100
    ANALYZE_EVERY: int = 1_000
    CHECKPOINT_EVERY: int = 0  # 0 = only at the end

    # Convergence: total loss change below PLATEAU_TOL over PLATEAU_WINDOW epochs
    PLATEAU_WINDOW: int = 2_000
    PLATEAU_TOL: float = 1e-6

    # Minimal model
    SIM_STEPS: int = 20_000
    SIM_RECORD_EVERY: int = 10

    # Circuit analysis
    ANALYSIS_BATCH: int = 4_096
    GEN_ONLY_THRESHOLD: float = 0.95
    KEY_FREQ_ENERGY: float = 0.9
    ISOLOGIT_BUCKETS: int = 6

    class Config:
        env_file = ".env"
        extra = "allow"

    def get_epoch_budget(self, kind: str) -> int:
        budget_map = {
            "grok": self.GROK_EPOCHS,
            "mem": self.MEM_EPOCHS,
            "ungrok": self.UNGROK_EPOCHS,
            "semigrok": self.SEMIGROK_EPOCHS,
        }
        return budget_map.get(kind, self.GROK_EPOCHS)


settings = Settings()
