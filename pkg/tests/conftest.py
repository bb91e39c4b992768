import numpy as np
import pytest

from spikemap import zoo
from spikemap.convert import convert
from spikemap.preprocess import Hyper, calibrate, preprocess

DESK_SEEDS = {"mlp": 0, "lenet": 2, "vgg": 2, "trained-mlp": 3}


class Pipeline:
    """One desk model taken through the full conversion, shared by tests."""

    def __init__(self, kind: str, n_calib=512, n_eval=1000):
        seed = DESK_SEEDS[kind]
        self.kind = kind
        self.net = zoo.make_model(kind, seed)
        self.hyper = Hyper()
        self.scaled = preprocess(self.net, self.hyper)
        self.calib = zoo.make_dataset(self.net, n_calib, seed + 1, labeled=False)
        calibrate(self.scaled, self.scaled.normalize_input(self.calib.images))
        self.eval = zoo.make_dataset(self.net, n_eval, seed + 2, labeled=True)
        self.snn = convert(self.scaled, "fixed_alpha")

    def snn_variant(self, variant: str):
        return convert(self.scaled, variant)

    def eval_inputs(self):
        return self.scaled.normalize_input(self.eval.images)


@pytest.fixture(scope="session")
def mlp_pipe():
    return Pipeline("mlp")


@pytest.fixture(scope="session")
def lenet_pipe():
    return Pipeline("lenet")


@pytest.fixture(scope="session")
def vgg_pipe():
    return Pipeline("vgg")


@pytest.fixture(scope="session")
def desk_pipes(mlp_pipe, lenet_pipe, vgg_pipe):
    return {"mlp": mlp_pipe, "lenet": lenet_pipe, "vgg": vgg_pipe}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
