"""Shared fixtures. Heavy artifacts are session-scoped so the suite stays fast."""

import numpy as np
import pytest

from qoecast.pipeline import build_dataset
from qoecast.seeding import derive_seed
from qoecast.synthgen import GeneratorConfig, generate_trace
from qoecast.train import TrainConfig, train_variant


@pytest.fixture(scope="session")
def small_traces():
    """Two 600 s traces, enough for a 10+ sequence split."""
    return [
        generate_trace(GeneratorConfig(seed=derive_seed(5, f"trace:{i}"),
                                       duration_s=600, trace_id=f"trace_{i:02d}"))
        for i in range(2)
    ]


@pytest.fixture(scope="session")
def small_dataset(small_traces):
    return build_dataset(small_traces)


@pytest.fixture(scope="session")
def gru_bundle(small_dataset):
    """A briefly trained recurrent bundle for evaluation/explain/serve tests."""
    cfg = TrainConfig(seed=derive_seed(5, "variant:gru_basic"), max_epochs=5)
    bundle, _ = train_variant("gru_basic", small_dataset, cfg)
    return bundle


@pytest.fixture(scope="session")
def linear_bundle(small_dataset):
    cfg = TrainConfig(seed=derive_seed(5, "variant:lin_basic"))
    bundle, _ = train_variant("lin_basic", small_dataset, cfg)
    return bundle


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
