import math

import numpy as np
import pytest

from mvmol import datasets
from mvmol.config import LossConfig, ModelConfig, TrainConfig
from mvmol.losses import compose_total
from mvmol.trainer import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    LabelMismatch,
    adam_step,
    finetune,
    metrics_header,
    pretrain,
    split_indices,
    train_probe,
)

SMALL = TrainConfig(
    batch_size=8,
    epochs=4,
    lr=1e-3,
    seed=3,
    model=ModelConfig(hidden=8, latent=4, proj=8, depth=2),
)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([[1.0, -2.0]])}
    g = {"w": np.zeros((1, 2))}
    out, state = adam_step(p, g, None, lr=0.1, wd=0.0, t=1)
    np.testing.assert_array_equal(out["w"], p["w"])


def test_adam_constant_gradient_approaches_lr_sign():
    p = {"w": np.array([[0.0]])}
    g = {"w": np.array([[0.7]])}
    state = None
    prev = p["w"].copy()
    for t in range(1, 60):
        p, state = adam_step(p, g, state, lr=0.01, wd=0.0, t=t)
    step = prev[0, 0] - p["w"][0, 0]  # cumulative; compare last single step
    p2, _ = adam_step(p, g, state, lr=0.01, wd=0.0, t=60)
    last = p["w"][0, 0] - p2["w"][0, 0]
    assert last == pytest.approx(0.01, rel=1e-3)  # lr * sign(g)


def test_adam_two_step_hand_trajectory():
    lr, g_val = 0.1, 0.5
    p = {"w": np.array([[1.0]])}
    g = {"w": np.array([[g_val]])}

    # independent hand computation of two bias-corrected steps
    m = v = 0.0
    x = 1.0
    for t in (1, 2):
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g_val
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g_val**2
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        x -= lr * m_hat / (math.sqrt(v_hat) + ADAM_EPS)

    state = None
    for t in (1, 2):
        p, state = adam_step(p, g, state, lr=lr, wd=0.0, t=t)
    assert p["w"][0, 0] == pytest.approx(x, abs=1e-15)


def test_adam_decoupled_weight_decay():
    p = {"w": np.array([[2.0]])}
    g = {"w": np.array([[0.0]])}
    out, _ = adam_step(p, g, None, lr=0.1, wd=0.5, t=1)
    assert out["w"][0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_shape_mismatch():
    from mvmol.tensor import ShapeMismatch

    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.ones((2, 2))}, {"w": np.ones((1, 2))}, None, 0.1, 0.0, 1)


# -- pretrain ----------------------------------------------------------------------


def test_pretrain_zero_epochs_equals_initialization(tmp_path):
    from mvmol.model import init_params

    mols = datasets.toy_corpus(6, seed=1)
    cfg = TrainConfig(batch_size=4, epochs=0, seed=5,
                      model=ModelConfig(hidden=8, latent=4, proj=8, depth=2))
    result = pretrain(mols, cfg, out_dir=str(tmp_path / "run"))
    init = init_params(cfg.model, cfg.seed)
    for name, t in init.items():
        np.testing.assert_array_equal(result.final_params[name], t.data)


def test_pretrain_deterministic_reruns(tmp_path):
    mols = datasets.toy_corpus(10, seed=2)
    r1 = pretrain(mols, SMALL, out_dir=str(tmp_path / "a"))
    r2 = pretrain(mols, SMALL, out_dir=str(tmp_path / "b"))
    assert r1.metrics_csv == r2.metrics_csv
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (
        tmp_path / "b" / "final.ckpt"
    ).read_bytes()
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (
        tmp_path / "b" / "best.ckpt"
    ).read_bytes()


def test_pretrain_csv_rows_satisfy_composition_identity():
    mols = datasets.toy_corpus(10, seed=4)
    result = pretrain(mols, SMALL)
    lines = result.metrics_csv.strip().splitlines()
    assert lines[0] == metrics_header()
    assert len(lines) == 1 + SMALL.epochs
    for row in lines[1:]:
        cells = row.split(",")
        vals = dict(zip(metrics_header().split(",")[1:], map(float, cells[1:])))
        _, expected_total = compose_total(
            vals["l_skl"], vals["l_jsmi"], vals["l_2d"], vals["l_3d"],
            vals["l_2d_to_3d"], vals["l_3d_to_2d"], SMALL.loss,
        )
        assert vals["total"] == expected_total  # bitwise


def test_pretrain_moves_every_parameter_block():
    from mvmol.model import init_params

    mols = datasets.toy_corpus(8, seed=6)
    cfg = TrainConfig(batch_size=4, epochs=3, lr=1e-3, seed=7,
                      model=ModelConfig(hidden=8, latent=4, proj=8, depth=2))
    result = pretrain(mols, cfg)
    init = init_params(cfg.model, cfg.seed)
    for name, t in init.items():
        assert not np.array_equal(result.final_params[name], t.data), name


def test_pretrain_best_checkpoint_tracks_lowest_total():
    mols = datasets.toy_corpus(8, seed=8)
    result = pretrain(mols, SMALL)
    totals = [r.total for r in result.reports]
    assert result.best_epoch == int(np.argmin(totals)) + 1


# -- downstream --------------------------------------------------------------------


def test_split_622_default():
    tr, va, te = split_indices(600, seed=0)
    assert (len(tr), len(va), len(te)) == (360, 120, 120)
    assert sorted(np.concatenate([tr, va, te])) == list(range(600))


def test_probe_constant_labels_trivial_fit():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((40, 8))
    head = train_probe(z, np.ones(40), "cls", epochs=200)
    assert (head.predict_proba(z) > 0.9).all()


def test_probe_linearly_separable_latents():
    from mvmol.evalx import metric

    rng = np.random.default_rng(1)
    z = rng.standard_normal((200, 8))
    y = (z[:, 0] + 0.5 * z[:, 1] > 0).astype(float)
    head = train_probe(z[:120], y[:120], "cls", epochs=400)
    auc = metric(head.predict_proba(z[120:]).ravel(), y[120:], "rocauc")
    assert auc > 0.95


def test_probe_rejects_bad_labels():
    rng = np.random.default_rng(2)
    with pytest.raises(LabelMismatch):
        train_probe(rng.standard_normal((10, 4)), np.arange(10.0), "cls")


def test_finetune_probe_end_to_end():
    corpus = datasets.motif_corpus(40, seed=3)
    mols = [m for m, _, _ in corpus]
    labels = [float(l) for _, l, _ in corpus]
    cfg = TrainConfig(batch_size=8, epochs=2, seed=9,
                      model=ModelConfig(hidden=8, latent=4, proj=8, depth=2))
    pre = pretrain(mols, cfg)
    result = finetune(pre.final_params, mols, labels, "cls", cfg, head_epochs=150)
    assert result.metric_name == "rocauc"
    assert 0.0 <= result.val_metric <= 1.0
    assert 0.0 <= result.test_metric <= 1.0


def test_finetune_label_count_mismatch():
    mols = datasets.toy_corpus(5, seed=1)
    cfg = SMALL
    with pytest.raises(LabelMismatch):
        finetune({}, mols, [1.0, 0.0], "cls", cfg)
