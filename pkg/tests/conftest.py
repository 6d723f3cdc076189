import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthetic import make_synthetic  # noqa: E402

from tabverify import trainer  # noqa: E402
from tabverify.retriever import IndexConfig, build_index  # noqa: E402


@pytest.fixture(scope="session")
def synthetic_ds():
    return make_synthetic()


@pytest.fixture(scope="session")
def synthetic_index(synthetic_ds):
    return build_index(synthetic_ds.corpus, IndexConfig())


@pytest.fixture(scope="session")
def desk_model_config():
    """Small desk-scale model sized so the whole suite trains in seconds."""
    return trainer.ModelConfig(
        encode_dim=32,
        embed_dim=32,
        hash_buckets=4096,
        encoder_hidden=64,
        head_hidden=64,
        attention_heads=2,
        dropout=0.1,
    )


@pytest.fixture(scope="session")
def desk_train_config():
    return trainer.TrainConfig(
        learning_rate=1e-3,
        warmup_batches=100,
        batch_size=16,
        epochs=50,
        seed=0,
        k=3,
        head="joint",
    )


@pytest.fixture(scope="session")
def joint_checkpoint(synthetic_ds, synthetic_index, desk_model_config, desk_train_config):
    return trainer.train(
        synthetic_ds.train_claims,
        synthetic_ds.corpus,
        synthetic_index,
        desk_train_config,
        desk_model_config,
    )


@pytest.fixture(scope="session")
def ternary_checkpoint(synthetic_ds, synthetic_index, desk_model_config, desk_train_config):
    from dataclasses import replace

    config = replace(desk_train_config, head="ternary")
    return trainer.train(
        synthetic_ds.train_claims,
        synthetic_ds.corpus,
        synthetic_index,
        config,
        desk_model_config,
    )


@pytest.fixture(scope="session")
def joint_eval(joint_checkpoint, synthetic_ds, synthetic_index):
    return trainer.evaluate_checkpoint(
        joint_checkpoint,
        synthetic_ds.eval_claims,
        synthetic_ds.corpus,
        synthetic_index,
        compute_gold_rank=True,
    )


@pytest.fixture(scope="session")
def ternary_eval(ternary_checkpoint, synthetic_ds, synthetic_index):
    return trainer.evaluate_checkpoint(
        ternary_checkpoint,
        synthetic_ds.eval_claims,
        synthetic_ds.corpus,
        synthetic_index,
    )


@pytest.fixture(scope="session")
def ablation_reports(synthetic_ds, synthetic_index, desk_model_config, desk_train_config):
    from tabverify import evalkit

    return evalkit.ablate(
        synthetic_ds.train_claims,
        synthetic_ds.eval_claims,
        synthetic_ds.corpus,
        synthetic_index,
        desk_train_config,
        desk_model_config,
    )
