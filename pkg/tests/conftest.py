"""Shared fixtures: one small synthetic city trained end to end per session."""

import pytest

from atcor import pipeline
from atcor.synthcity import SynthSpec, make_city
from atcor.train import TrainConfig

FIXTURE_CONV = [(3, 3, 6), (2, 2, 4)]


@pytest.fixture(scope="session")
def trained_city(tmp_path_factory):
    """Small synthetic city with every scheme trained at toy scale.

    Used by the evaluate, service and pipeline tests; quality is irrelevant
    here, wiring and contracts are what matters.
    """
    root = tmp_path_factory.mktemp("city")
    city = make_city(SynthSpec(seed=7, grid_rows=9, grid_cols=9))
    paths = city.write(root / "raw")
    pipeline.run_ingest(city.config, str(paths["trips"]), str(paths["weather"]),
                        str(paths["pois"]), root / "arts")
    arts = pipeline.Artifacts.load(root / "arts")
    pipeline.run_featurize(arts)
    pipeline.run_cluster(arts, k=2, seed=0)
    tc = TrainConfig(learning_rate=0.003, batch_size=64, epochs=40,
                     lookback=24, d=16, seed=0, dropout=0.0)
    pipeline.run_train(arts, tc, schemes=("atcor", "rnn", "lstm", "gru"),
                       conv_spec=FIXTURE_CONV)
    return {"root": root, "city": city, "arts_dir": root / "arts"}


@pytest.fixture()
def arts(trained_city):
    return pipeline.Artifacts.load(trained_city["arts_dir"])
