from .config import ExperimentConfig, load_config, save_config
from .pipeline import RunRecord, Session, run_baseline, run_method, run_pipeline
from .sweep import sweep_cloud_content

__all__ = ["ExperimentConfig", "load_config", "save_config", "RunRecord", "Session",
           "run_baseline", "run_method", "run_pipeline", "sweep_cloud_content"]
