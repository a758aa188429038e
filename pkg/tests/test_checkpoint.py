"""Checkpoint container: bit-exact round-trips and corruption rejection."""

import numpy as np
import pytest

import pden.autodiff as ad
from pden.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from pden.losses import LossWeights
from pden.nets import (init_cycle_generator, init_generator, init_task_model,
                       param_digest, predict)
from pden.rng import Rng


@pytest.fixture()
def model(tiny_arch):
    return init_task_model(tiny_arch, Rng(21))


def test_task_model_roundtrip(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, seed=3, step=17, loss_weights=LossWeights().to_dict())
    loaded, manifest = load_checkpoint(path)
    assert param_digest(loaded) == param_digest(model)
    assert manifest["kind"] == "task_model"
    assert manifest["seed"] == 3 and manifest["step"] == 17
    assert manifest["loss_weights"]["w_cyc"] == 20.0


def test_reload_gives_bit_identical_predictions(tmp_path, model, tiny_test):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, seed=0, step=0)
    loaded, _ = load_checkpoint(path)
    x = ad.constant(tiny_test.images)
    np.testing.assert_array_equal(predict(loaded, x), predict(model, x))


def test_generator_kinds_roundtrip(tmp_path, tiny_arch):
    for init, kind in ((init_generator, "generator"),
                       (init_cycle_generator, "cycle_generator")):
        net = init(tiny_arch, Rng(8))
        path = tmp_path / f"{kind}.ckpt"
        save_checkpoint(path, net, seed=1, step=2)
        loaded, manifest = load_checkpoint(path)
        assert manifest["kind"] == kind
        assert param_digest(loaded) == param_digest(net)


def test_extra_manifest_fields_roundtrip(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, seed=0, step=0, extra={"k": 3, "note": "x"})
    _, manifest = load_checkpoint(path)
    assert manifest["extra"] == {"k": 3, "note": "x"}


def test_rejects_wrong_header(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, seed=0, step=0)
    blob = path.read_bytes()
    path.write_bytes(b"NOPE-CKPT-9\n" + blob[12:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_rejects_truncated_payload(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, seed=0, step=0)
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_rejects_trailing_garbage(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, seed=0, step=0)
    path.write_bytes(path.read_bytes() + b"\x00" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_rejects_corrupt_manifest_json(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, seed=0, step=0)
    blob = bytearray(path.read_bytes())
    blob[20] = ord("\\")  # break the JSON body
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
