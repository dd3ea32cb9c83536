import pytest

from pqm.pipeline import PipelineConfig

TINY = {
    "seed": 3,
    "model": {"d_model": 32},
    "lora": {"rank": 2},
    "budget": {"base_steps": 60, "pretrain_steps": 40, "adapt_steps": 20, "teacher_steps": 40, "select_every": 5},
    "data": {"source_speakers": 6, "pool_speakers": 6, "pool_utts": 30, "speakers": 3, "utts": 25},
    "sweep_counts": [0, 5, 10],
}


@pytest.fixture
def tiny_config() -> PipelineConfig:
    return PipelineConfig.from_dict(TINY)
