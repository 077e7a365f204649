import numpy as np
import pytest

from synnet.model import Topology, build_model
from synnet.optim import OptimState
from synnet.persist import (RunConfig, ConfigError, CheckpointError,
                            parse_config, format_config, topology_from_config,
                            train_config_from_config, Checkpoint,
                            save_checkpoint, load_checkpoint,
                            pack_training, unpack_training)
from synnet.tensor import RngStream


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_parse_empty_config_gives_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.lambda1 == 10.0 and cfg.lambda2 == 5.0
    assert cfg.lambda3 == 0.5 and cfg.lambda4 == 0.0001
    assert cfg.lr == 0.01 and cfg.momentum == 0.9
    assert cfg.batch_size == 32 and cfg.channels == (32, 64, 64)


def test_parse_config_overrides_and_comments():
    cfg = parse_config("""
# training setup
lr = 0.2            # aggressive
epochs = 5
channels = 8,16,16
input_modalities = t1, t2
loss = l2
augment = yes
""")
    assert cfg.lr == 0.2
    assert cfg.epochs == 5
    assert cfg.channels == (8, 16, 16)
    assert cfg.input_modalities == ("t1", "t2")
    assert cfg.loss == "l2"
    assert cfg.augment is True


def test_parse_config_errors_carry_line_numbers():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("lr = 0.1\nnot a setting\n")
    with pytest.raises(ConfigError, match="line 1.*unknown key"):
        parse_config("learning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="line 3.*cannot parse"):
        parse_config("lr = 0.1\nepochs = 2\nbatch_size = many\n")


def test_config_format_parse_roundtrip():
    cfg = RunConfig(lr=0.05, channels=(4, 8), depth=2, augment=True,
                    input_modalities=("m1", "m3"), ssim_mode="global")
    assert parse_config(format_config(cfg)) == cfg


def test_topology_and_train_config_from_config():
    cfg = parse_config("topology = miso\ndepth = 2\nchannels = 4,8\n"
                       "final_width = 8\nmiso_index_arm = 1\nlambda3 = 0.1\n")
    topo = topology_from_config(cfg)
    assert topo.kind == "miso" and topo.depth == 2
    assert topo.channels == (4, 8) and topo.miso_index_arm == 1
    tcfg = train_config_from_config(cfg)
    assert tcfg.loss_weights.lambda3 == 0.1
    assert tcfg.ssim.mode == "local" and tcfg.ssim.window == 7


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _ckpt(dtype):
    topo = Topology(kind="siso", depth=2, channels=(4, 6), final_width=4)
    rng = RngStream(1)
    tensors = {
        "param.w": rng.uniform((4, 1, 3, 3), -1, 1, dtype=dtype),
        "param.b": rng.uniform((4,), -1, 1, dtype=dtype),
        "state.rm": rng.uniform((6,), -1, 1, dtype=dtype),
    }
    return Checkpoint(topo, tensors, config_text="lr = 0.05\n")


@pytest.mark.parametrize("dtype", ["single", "double"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, dtype):
    cp = _ckpt(dtype)
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(path, cp)
    back = load_checkpoint(path)
    assert back.topology.kind == cp.topology.kind
    assert back.topology.depth == cp.topology.depth
    assert tuple(back.topology.channels) == cp.topology.channels
    assert back.config_text == cp.config_text
    assert list(back.tensors) == list(cp.tensors)
    for name in cp.tensors:
        assert back.tensors[name].dtype == cp.tensors[name].dtype
        assert np.array_equal(back.tensors[name], cp.tensors[name])


def test_checkpoint_save_twice_byte_identical(tmp_path):
    cp = _ckpt("single")
    p1, p2 = str(tmp_path / "a"), str(tmp_path / "b")
    save_checkpoint(p1, cp)
    save_checkpoint(p2, cp)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "bad")
    with open(path, "wb") as f:
        f.write(b"NOTACKPT" + bytes(64))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncation_names_missing_field(tmp_path):
    path = str(tmp_path / "t")
    save_checkpoint(path, _ckpt("single"))
    raw = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_rejects_unsupported_version(tmp_path):
    path = str(tmp_path / "v")
    save_checkpoint(path, _ckpt("single"))
    raw = bytearray(open(path, "rb").read())
    raw[8:12] = (99).to_bytes(4, "little")
    open(path, "wb").write(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_pack_unpack_training_roundtrip(tmp_path):
    topo = Topology(kind="siso", depth=1, channels=(4,), final_width=4)
    model, params, state = build_model(topo, RngStream(2), dtype="single")
    opt = OptimState(velocity={n: np.full_like(p, 0.5) for n, p in params.items()},
                     iteration=37, epoch=4, lr=0.01, momentum=0.9)
    cp = pack_training(topo, params, state, opt, "seed = 9\n")
    path = str(tmp_path / "train.ckpt")
    save_checkpoint(path, cp)
    p2, s2, o2 = unpack_training(load_checkpoint(path), lr=0.01, momentum=0.9)
    assert set(p2) == set(params) and set(s2) == set(state)
    for n in params:
        assert np.array_equal(p2[n], params[n])
        assert np.array_equal(o2.velocity[n], opt.velocity[n])
    for n in state:
        assert np.array_equal(s2[n], state[n])
    assert o2.iteration == 37 and o2.epoch == 4


def test_loaded_checkpoint_reproduces_predictions(tmp_path):
    topo = Topology(kind="miso", depth=2, channels=(4, 6), final_width=4,
                    miso_index_arm=1)
    model, params, state = build_model(topo, RngStream(3), dtype="double")
    rng = RngStream(4)
    inputs = [rng.uniform((2, 1, 8, 8), 0, 1, dtype="double") for _ in range(2)]
    before, _ = model.forward(params, state, inputs, mode="infer")

    cfg = RunConfig(topology="miso", depth=2, channels=(4, 6), final_width=4,
                    miso_index_arm=1)
    cp = pack_training(topo, params, state, OptimState(), format_config(cfg))
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, cp)
    loaded = load_checkpoint(path)
    assert loaded.topology.miso_index_arm == 1
    p2, s2, _ = unpack_training(loaded, 0.01, 0.9)
    from synnet.model import SynNetModel
    after, _ = SynNetModel(loaded.topology).forward(p2, s2, inputs, mode="infer")
    assert np.array_equal(before[0], after[0])
