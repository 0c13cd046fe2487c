import numpy as np
import pytest
from scipy import stats as sps

from predcode import training as T
from predcode import weights_io
from predcode.model import PredNetConfig, forward, predict_windows, refine_batch
from predcode.predictors import LeftPredictor, PredNetPredictor
from predcode import metrics as M

TINY = PredNetConfig(context_size=5, channels=4, num_residual_units=1)


def test_sample_reproducible_and_targets(rng):
    imgs = [rng.integers(0, 256, (20, 30), dtype=np.uint8), rng.integers(0, 256, (15, 10), dtype=np.uint8)]
    a = T.sample_patches(imgs, 500, TINY, seed=3, source_ids=[7, 9])
    b = T.sample_patches(imgs, 500, TINY, seed=3, source_ids=[7, 9])
    np.testing.assert_array_equal(a.windows, b.windows)
    np.testing.assert_array_equal(a.origins, b.origins)
    by_id = {7: imgs[0], 9: imgs[1]}
    for (sid, x, y), t in zip(a.origins, a.targets):
        assert t == np.float32(by_id[sid][y, x]) / np.float32(255)
    assert set(a.origins[:, 0]) <= {7, 9}


def test_sample_count_errors(rng):
    with pytest.raises(ValueError):
        T.sample_patches([np.zeros((4, 4), np.uint8)], 0, TINY, 0)
    with pytest.raises(T.DatasetTagError):
        T.sample_patches([np.zeros((4, 4), np.uint8)], 5, TINY, 0, tag="train")


def test_centers_uniform_chi_square():
    rng = np.random.default_rng(0)
    c = T.sample_centers([(8, 12)], 100_000, rng)
    counts = np.bincount(c[:, 2] * 12 + c[:, 1], minlength=96)
    assert sps.chisquare(counts).pvalue > 0.01


def test_disjoint_check(rng):
    img = rng.integers(0, 256, (10, 10), dtype=np.uint8)
    a = T.sample_patches([img], 10, TINY, 0, source_ids=[1])
    b = T.sample_patches([img], 10, TINY, 0, tag=T.TAG_S_PRIME, source_ids=[1])
    with pytest.raises(T.DatasetTagError):
        T.check_disjoint(a, b)


def test_constant_dataset_fits():
    n = 256
    windows = np.full((n, 1, 5, 5), 0.3, np.float32)
    ds = T.PatchDataset(windows, np.full(n, 0.3, np.float32), np.zeros((n, 3), np.int64), T.TAG_S, 0, (0,))
    trace = T.LossTrace()
    w = T.train_stage1(ds, "l1", T.TrainConfig(steps=2000, lam=0.0), TINY, trace=trace)
    L = trace.losses()
    assert L[-1] < 1e-2
    assert L[-1000:].mean() < L[:1000].mean()
    assert abs(predict_windows(w, windows[:1])[0] - 0.3) < 1e-2


def test_stage1_reproducible_and_guarded(rng):
    imgs = [rng.integers(0, 256, (16, 16), dtype=np.uint8)]
    ds = T.sample_patches(imgs, 300, TINY, 0)
    cfg = T.TrainConfig(steps=30, batch_size=16)
    a = T.train_stage1(ds, "l1", cfg, TINY)
    b = T.train_stage1(ds, "l1", cfg, TINY)
    for (_, x), (_, y) in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert a.config.objective == "l1"
    assert T.train_stage1(ds, "linf", cfg, TINY).config.objective == "lp8"
    with pytest.raises(ValueError):
        T.train_stage1(ds, "l3", cfg, TINY)
    ds_prime = T.sample_patches(imgs, 30, TINY, 0, tag=T.TAG_S_PRIME)
    with pytest.raises(T.DatasetTagError):
        T.train_stage1(ds_prime, "l1", cfg, TINY)


def test_nonfinite_loss_aborts(rng):
    ds = T.sample_patches([rng.integers(0, 256, (8, 8), dtype=np.uint8)], 50, TINY, 0)
    ds.targets[:] = np.nan
    with pytest.raises(T.TrainingAborted, match="step 1"):
        T.train_stage1(ds, "l1", T.TrainConfig(steps=5, batch_size=8), TINY)


def ramp(h, w, offset=0):
    ys, xs = np.mgrid[0:h, 0:w]
    return ((xs + ys + offset) % 256).astype(np.uint8)


def test_ramp_beats_left():
    train = [ramp(64, 64, o) for o in (0, 50, 120, 200)]
    held = ramp(48, 48, 77)
    ds = T.sample_patches(train, 4000, TINY, 1)
    w = T.train_stage1(ds, "l1", T.TrainConfig(steps=3000, lam=0.0, lr=1e-3), TINY)
    net = M.stats(M.residuals(held, PredNetPredictor(w).predict_image(held)), held).l1
    left = M.stats(M.residuals(held, LeftPredictor().predict_image(held)), held).l1
    assert net < left


def test_lambda_sparsity_small():
    rng = np.random.default_rng(0)
    imgs = [np.clip(np.cumsum(rng.normal(0, 6, (40, 40)), axis=1) + 128, 0, 255).astype(np.uint8) for _ in range(3)]
    ds = T.sample_patches(imgs, 3000, TINY, 0)
    counts = {}
    for lam in (0.0, 0.2):
        w = T.train_stage1(ds, "l1", T.TrainConfig(steps=600, lam=lam), TINY)
        counts[lam] = int((np.abs(w.head_w.data) < 1e-3).sum())
    assert counts[0.2] >= counts[0.0]


def _stage1(rng):
    imgs = [rng.integers(0, 256, (16, 16), dtype=np.uint8)]
    ds = T.sample_patches(imgs, 200, TINY, 0)
    cfg = T.TrainConfig(steps=5, batch_size=8)
    return T.StageOneResult(*(T.train_stage1(ds, o, cfg, TINY) for o in ("l1", "l2", "lp8")))


def test_refine_dataset(rng):
    s1 = _stage1(rng)
    sp = T.sample_patches([rng.integers(0, 256, (12, 12), dtype=np.uint8)], 40, TINY, 1, tag=T.TAG_S_PRIME)
    rd = T.build_refine_dataset(s1, sp)
    assert len(rd) == len(sp)
    for i in (0, 17, 39):
        assert rd.triples[i, 0] == pytest.approx(forward(s1.weights_l1, sp.windows[i:i + 1]).data[0, 0], rel=1e-5)
    s = T.sample_patches([rng.integers(0, 256, (12, 12), dtype=np.uint8)], 5, TINY, 1)
    with pytest.raises(T.DatasetTagError):
        T.build_refine_dataset(s1, s)


def test_stage2_identity_and_determinism(rng):
    p1 = rng.uniform(size=500).astype(np.float32)
    trip = np.stack([p1, rng.uniform(size=500), rng.uniform(size=500)], axis=1).astype(np.float32)
    rd = T.RefineDataset(trip, p1.copy())
    cfg = T.TrainConfig(steps=300, batch_size=32)
    a = T.train_stage2(rd, cfg)
    preds = refine_batch(a, trip).data[:, 0]
    assert np.abs(preds - p1).mean() <= 1e-3
    b = T.train_stage2(rd, cfg)
    for (_, x), (_, y) in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    with pytest.raises(ValueError):
        T.train_stage2(T.RefineDataset(trip[:0], p1[:0]), cfg)


def test_checkpoints_and_trace(tmp_path, rng):
    ds = T.sample_patches([rng.integers(0, 256, (16, 16), dtype=np.uint8)], 100, TINY, 4)
    trace = T.LossTrace()
    cfg = T.TrainConfig(steps=20, batch_size=8, checkpoint_every=10, checkpoint_dir=str(tmp_path))
    T.train_stage1(ds, "l2", cfg, TINY, trace=trace)
    ck = sorted(tmp_path.glob("*.pnw"))
    assert [p.name for p in ck] == ["l2_step0000010.pnw", "l2_step0000020.pnw"]
    import json

    meta = json.loads((tmp_path / "l2_step0000020.pnw.json").read_text())
    assert meta["step"] == 20 and meta["objective"] == "l2" and meta["dataset_seed"] == 4
    assert len(T.LossTrace.from_csv(meta["loss_trace"]).rows) == 20
    assert isinstance(weights_io.load_weights(ck[0]), type(ds)) is False
    trace.to_csv(tmp_path / "t.csv")
    head = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert head == "step,loss,penalty"


def test_train_config_validation():
    for bad in (dict(lr=0), dict(lam=-1), dict(batch_size=0), dict(steps=0), dict(l2_loss="huber")):
        with pytest.raises(ValueError):
            T.TrainConfig(**bad)
