import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oflseg.config import PipelineConfig, TrainConfig
from oflseg.errors import ConfigError, ShapeError
from oflseg.frozen import decode_mask, init_stack
from oflseg.fusion import (
    AdamW, FusionParams, LabeledFrame, average, convert, frame_loss, fuse, fused_features,
    fusion_meta, init_fusion, load_fusion, prepare_training, save_fusion, train_offline,
)
from oflseg.memory import attention_checksum, init_attention
from oflseg.tensor import Tape, Tensor, combined_loss, grad_check, mean, mul

C, D = 4, 2
# Finite-difference step through the ReLU decoder: at 1e-2 a few coordinates
# straddle a kink, which is a property of the probe, not the gradient.
DECODER_FD_EPS = 3e-3
CFG = PipelineConfig(C=C, D=D)


def random_fusion(seed, C=C, D=D, scale=0.3):
    r = np.random.default_rng(seed)
    f = lambda *s: (scale * r.normal(size=s)).astype(np.float32)
    return FusionParams(f(1, 2 * C, 3, 3), f(1), f(C, D, 1, 1), f(C))


def saturated(logit, C=C, D=D):
    return FusionParams(np.zeros((1, 2 * C, 3, 3), np.float32), np.array([logit], np.float32),
                        np.zeros((C, D, 1, 1), np.float32), np.zeros(C, np.float32))


def frames(n, size=16, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        yy, xx = np.mgrid[:size, :size]
        cy, cx = r.uniform(5, size - 5, 2)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2 < 16).astype(np.float32)
        img = np.clip(0.2 + 0.6 * mask + 0.05 * r.normal(size=(size, size)), 0, 1)
        out.append(LabeledFrame(np.repeat(img[None], 3, 0).astype(np.float32), mask, "s", i))
    return out


@pytest.fixture(scope="module")
def nets():
    return init_stack(0, C, D), init_attention(1, C, D)


class TestConvert:
    def test_zero(self, rng):
        fp = FusionParams(np.zeros((1, 2, 3, 3), np.float32), np.zeros(1, np.float32),
                          np.zeros((1, 2, 1, 1), np.float32), np.zeros(1, np.float32))
        assert not convert(fp, Tensor(rng.normal(size=(2, 3, 3)))).data.any()

    def test_worked_example(self):
        fp = FusionParams(np.zeros((1, 4, 3, 3), np.float32), np.zeros(1, np.float32),
                          np.array([[[[1.0]]], [[[-1.0]]]], np.float32), np.zeros(2, np.float32))
        out = convert(fp, Tensor(np.full((1, 2, 2), 3.0))).data
        assert np.all(out[0] == 3.0) and np.all(out[1] == -3.0)

    def test_bad_channels(self, rng):
        with pytest.raises(ShapeError):
            convert(random_fusion(0), Tensor(rng.normal(size=(3, 2, 2))))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        r = np.random.default_rng(seed)
        fp = random_fusion(seed)
        x = Tensor(r.normal(size=(D, 3, 3)))
        up = Tensor(r.normal(size=(C, 3, 3)))
        loss = lambda w: mean(mul(convert(fp, x, w=w), up))
        assert grad_check(loss, Tensor(fp.converter_w)) < 1e-3
        assert grad_check(lambda t: mean(mul(convert(fp, t), up)), x) < 1e-3


class TestFuse:
    def test_zero_weight_net_is_average(self, rng):
        fp = init_fusion(0, C, D)
        e1, e2 = (Tensor(rng.normal(size=(C, 3, 3))) for _ in range(2))
        out, w = fuse(fp, e1, e2)
        assert np.all(w.data == 0.5)
        np.testing.assert_allclose(out.data, average(e1, e2).data, atol=1e-6)

    def test_saturation(self, rng):
        e1, e2 = (Tensor(rng.normal(size=(C, 3, 3))) for _ in range(2))
        np.testing.assert_allclose(fuse(saturated(50.0), e1, e2)[0].data, e1.data, atol=1e-4)
        np.testing.assert_allclose(fuse(saturated(-50.0), e1, e2)[0].data, e2.data, atol=1e-4)

    def test_map_is_single_channel(self, rng):
        e = Tensor(rng.normal(size=(C, 5, 3)))
        assert fuse(random_fusion(0), e, e)[1].dims == (1, 5, 3)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            fuse(random_fusion(0), Tensor.zeros(C, 3, 3), Tensor.zeros(C, 3, 4))

    @given(st.integers(0, 2**31), st.floats(0.01, 10))
    def test_sandwich(self, seed, spread):
        r = np.random.default_rng(seed)
        e1, e2 = (Tensor(spread * r.normal(size=(C, 4, 4))) for _ in range(2))
        out = fuse(random_fusion(seed, scale=1.0), e1, e2)[0].data
        lo, hi = np.minimum(e1.data, e2.data), np.maximum(e1.data, e2.data)
        assert np.all(out >= lo - 1e-5) and np.all(out <= hi + 1e-5)

    @given(st.integers(0, 2**31))
    def test_idempotent(self, seed):
        e = Tensor(np.random.default_rng(seed).normal(size=(C, 4, 4)))
        assert np.abs(fuse(random_fusion(seed, scale=1.0), e, e)[0].data - e.data).max() <= 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_weight_net_gradient(self, seed):
        r = np.random.default_rng(seed)
        fp = random_fusion(seed)
        e1, e2 = (Tensor(r.normal(size=(C, 3, 3))) for _ in range(2))
        up = Tensor(r.normal(size=(C, 3, 3)))
        assert grad_check(lambda w: mean(mul(fuse(fp, e1, e2, w=w)[0], up)), Tensor(fp.weight_net_w)) < 1e-3
        assert grad_check(lambda b: mean(mul(fuse(fp, e1, e2, b=b)[0], up)), Tensor(fp.weight_net_b)) < 1e-3


class TestFusedFeatures:
    def test_base_is_e1(self, rng):
        e1 = Tensor(rng.normal(size=(C, 3, 3)))
        assert fused_features(CFG.ablation("base"), None, e1, None) is e1

    def test_learner_is_average(self, rng):
        fp = random_fusion(1)
        e1, e2 = Tensor(rng.normal(size=(C, 3, 3))), Tensor(rng.normal(size=(D, 3, 3)))
        got = fused_features(CFG.ablation("learner"), fp, e1, e2)
        assert got == average(e1, convert(fp, e2))


@pytest.mark.parametrize("seed", range(20))
def test_composed_loss_gradient(nets, seed):
    """Every FusionParams entry on a one-frame micro problem, through the frozen decoder."""
    stack, _ = nets
    r = np.random.default_rng(seed)
    fp = random_fusion(seed)
    e1, e2_raw = Tensor(r.normal(size=(C, 4, 4))), Tensor(r.normal(size=(D, 4, 4)))
    gt = (r.uniform(size=(16, 16)) < 0.4).astype(np.float32)
    _, grads = frame_loss(CFG, stack, fp, e1, e2_raw, gt, Tape())
    for name, arr in fp.arrays().items():
        def loss(t, name=name):
            p = decode_mask(stack, fused_features(CFG, fp, e1, e2_raw, {name: t}), taped=True)
            return combined_loss(p, gt)
        assert grad_check(loss, Tensor(arr), eps=DECODER_FD_EPS) < 1e-3, name
        assert grads[name].shape == arr.shape


class TestAdamW:
    def test_first_step_is_lr_sized(self):
        p = {"x": np.array([1.0, -2.0], np.float32)}
        AdamW(p, weight_decay=0.0).step(p, {"x": np.array([0.5, -3.0])}, 0.1)
        np.testing.assert_allclose(p["x"], [0.9, -1.9], rtol=1e-6)

    def test_decoupled_decay_on_zero_grad(self):
        p = {"x": np.array([2.0], np.float32)}
        AdamW(p, weight_decay=0.5).step(p, {"x": np.zeros(1)}, 0.1)
        assert p["x"][0] == pytest.approx(2.0 * (1 - 0.05), rel=1e-6)


@pytest.fixture(scope="module")
def trained(nets):
    stack, attn = nets
    before = (stack.checksum(), attention_checksum(attn))
    tcfg = TrainConfig(epochs=40, lr0=1e-2)
    fp, report = train_offline(stack, attn, CFG, frames(4), tcfg)
    return fp, report, before, tcfg


class TestTraining:
    def test_lr_schedule(self):
        t = TrainConfig()
        lrs = [t.lr_at(e) for e in range(1, 41)]
        assert lrs[:10] == [1e-3] * 10
        assert all(v == pytest.approx(1e-4) for v in lrs[10:30])
        assert all(v == pytest.approx(1e-5) for v in lrs[30:])

    def test_single_frame_rejected(self, nets):
        with pytest.raises(ConfigError):
            train_offline(*nets, CFG, frames(1))

    def test_leave_one_out_references(self, nets):
        prep = prepare_training(CFG, *nets, frames(4))
        assert all(i not in pf.refs and len(pf.refs) == 2 for i, pf in enumerate(prep))
        assert all(pf.e2_raw.dims == (D, 4, 4) for pf in prep)

    def test_loss_decreases(self, trained):
        _, report, _, _ = trained
        assert len(report.epochs) == 40
        assert report.losses[-1] < report.losses[0]

    def test_frozen(self, trained, nets):
        _, report, before, _ = trained
        stack, attn = nets
        assert (stack.checksum(), attention_checksum(attn)) == before
        assert report.frozen_checksums == {"stack": before[0], "attention": before[1]}

    def test_params_moved(self, trained):
        fp, report, _, _ = trained
        assert fp.checksum() != init_fusion(CFG.fusion_seed, C, D).checksum()
        assert report.fusion_checksum == fp.checksum()

    def test_deterministic(self, trained, nets):
        fp, report, _, tcfg = trained
        fp2, report2 = train_offline(*nets, CFG, frames(4), tcfg)
        assert report2.checksum() == report.checksum() and fp2.checksum() == fp.checksum()

    def test_timing_excluded_from_checksum(self, trained):
        report = trained[1]
        assert all(e["wall_time_s"] is None for e in report.to_dict(include_timing=False)["epochs"])

    def test_base_ablation_keeps_init(self, nets):
        cfg = CFG.ablation("base")
        fp, report = train_offline(*nets, cfg, frames(3), TrainConfig(epochs=2))
        assert fp.checksum() == init_fusion(cfg.fusion_seed, C, D).checksum()
        assert report.ablation == {"use_learner": False, "use_afm": False}


def test_save_load(tmp_path):
    fp = random_fusion(3)
    save_fusion(fp, tmp_path, {"ablation": "full"})
    back = load_fusion(tmp_path)
    assert back.checksum() == fp.checksum()
    meta = fusion_meta(tmp_path)
    assert meta["checksum"] == fp.checksum() and meta["ablation"] == "full"


def test_load_missing_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="weight_net.w.otns"):
        load_fusion(tmp_path)


def test_init_deterministic():
    assert init_fusion(5, C, D).checksum() == init_fusion(5, C, D).checksum()
    assert init_fusion(5, C, D).checksum() != init_fusion(6, C, D).checksum()
    assert np.abs(init_fusion(5, C, D).converter_w).max() <= np.sqrt(6.0 / D)
