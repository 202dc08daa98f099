import numpy as np
import pytest

from mvmol import datasets, encoders, molio, tensor as T
from mvmol.checkpoint import load_params, save_params
from mvmol.config import ModelConfig
from mvmol.encoders import (
    EmptyInput,
    egnn_forward,
    encode_view,
    fuse,
    gin_forward,
    init_egnn,
    init_gin,
    init_posterior_head,
    posterior_head,
    readout,
)
from mvmol.fragments import Subgraph, brics_fragment, ego_network
from mvmol.molio import parse_smiles, permute_molecule

CFG = ModelConfig(hidden=8, latent=4, proj=8, depth=2)


def _rng(seed=0):
    return np.random.default_rng(seed)


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _prep(smiles, seed=0):
    mol = molio.ensure_coords(parse_smiles(smiles))
    return mol


# -- GIN ------------------------------------------------------------------------


def test_gin_zero_params_give_zero_embedding():
    params = init_gin(_rng(), "gin2d", 4, 8, 2)
    for t in params.values():
        t.data[:] = 0.0
    sub = Subgraph(root=0, nodes=(0,), edges=(), kind="ego2d")
    out = gin_forward(params, "gin2d", sub, np.ones((1, 4)), 2)
    np.testing.assert_array_equal(out.data, np.zeros((1, 8)))


def test_gin_isomorphic_subgraphs_same_multiset():
    params = init_gin(_rng(1), "gin2d", 3, 8, 2)
    feats = np.tile(np.array([[1.0, 0.5, -0.2]]), (6, 1))
    tri1 = Subgraph(root=0, nodes=(0, 1, 2), edges=((0, 1), (1, 2), (0, 2)), kind="ego2d")
    tri2 = Subgraph(root=3, nodes=(3, 4, 5), edges=((3, 4), (4, 5), (3, 5)), kind="ego2d")
    out1 = gin_forward(params, "gin2d", tri1, feats, 2).data
    out2 = gin_forward(params, "gin2d", tri2, feats, 2).data
    np.testing.assert_allclose(np.sort(out1, axis=0), np.sort(out2, axis=0), atol=1e-12)


def test_gin_permutation_equivariance():
    rng = _rng(2)
    params = init_gin(rng, "gin2d", 20, 8, 3)
    for _ in range(10):
        mol = datasets.random_molecule(rng)
        feats = molio.featurize(mol)
        sub = Subgraph(
            root=0,
            nodes=tuple(range(mol.n_atoms)),
            edges=tuple((i, j) for i, j, _ in mol.bonds_2d),
            kind="ego2d",
        )
        out = gin_forward(params, "gin2d", sub, feats, 3).data

        perm = list(rng.permutation(mol.n_atoms))
        pmol = permute_molecule(mol, perm)
        psub = Subgraph(
            root=perm[0],
            nodes=tuple(range(mol.n_atoms)),
            edges=tuple((i, j) for i, j, _ in pmol.bonds_2d),
            kind="ego2d",
        )
        pout = gin_forward(params, "gin2d", psub, molio.featurize(pmol), 3).data
        for i in range(mol.n_atoms):
            assert np.abs(out[i] - pout[perm[i]]).max() < 1e-10


# -- EGNN -----------------------------------------------------------------------


def _whole_subgraph(mol):
    return Subgraph(
        root=0,
        nodes=tuple(range(mol.n_atoms)),
        edges=mol.edges_3d,
        kind="ball3d",
    )


def test_egnn_e3_invariance_of_scalars():
    rng = _rng(3)
    params = init_egnn(rng, "egnn3d", 20, 8, 3)
    for _ in range(20):
        mol = molio.ensure_coords(datasets.random_molecule(rng))
        feats = molio.featurize(mol)
        sub = _whole_subgraph(mol)
        h0, _ = egnn_forward(params, "egnn3d", sub, feats, mol.coords, 3)
        q = _random_rotation(rng)
        t = rng.uniform(-5, 5, size=3)
        moved = mol.coords @ q.T + t
        h1, x1 = egnn_forward(params, "egnn3d", sub, feats, moved, 3)
        assert np.abs(h0.data - h1.data).max() < 1e-8


def test_egnn_reflection_invariance():
    rng = _rng(4)
    params = init_egnn(rng, "egnn3d", 20, 8, 2)
    mol = molio.ensure_coords(parse_smiles("CC(C)CO"))
    feats = molio.featurize(mol)
    sub = _whole_subgraph(mol)
    h0, _ = egnn_forward(params, "egnn3d", sub, feats, mol.coords, 2)
    mirrored = mol.coords * np.array([-1.0, 1.0, 1.0])
    h1, _ = egnn_forward(params, "egnn3d", sub, feats, mirrored, 2)
    assert np.abs(h0.data - h1.data).max() < 1e-8


def test_egnn_coordinate_equivariance():
    rng = _rng(5)
    params = init_egnn(rng, "egnn3d", 20, 8, 2)
    mol = molio.ensure_coords(parse_smiles("CCOC"))
    feats = molio.featurize(mol)
    sub = _whole_subgraph(mol)
    _, x0 = egnn_forward(params, "egnn3d", sub, feats, mol.coords, 2)
    q = _random_rotation(rng)
    t = rng.uniform(-2, 2, size=3)
    _, x1 = egnn_forward(params, "egnn3d", sub, feats, mol.coords @ q.T + t, 2)
    np.testing.assert_allclose(x1.data, x0.data @ q.T + t, atol=1e-8)


def test_egnn_distance_sensitivity():
    # two atoms at distance d vs d' should embed differently for generic params
    feats = np.ones((2, 4))
    sub = Subgraph(root=0, nodes=(0, 1), edges=((0, 1),), kind="ball3d")
    differing = 0
    for draw in range(10):
        params = init_egnn(_rng(100 + draw), "egnn3d", 4, 8, 2)
        ca = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        cb = np.array([[0.0, 0, 0], [1.7, 0, 0]])
        ha, _ = egnn_forward(params, "egnn3d", sub, feats, ca, 2)
        hb, _ = egnn_forward(params, "egnn3d", sub, feats, cb, 2)
        if np.abs(ha.data - hb.data).max() > 1e-6:
            differing += 1
    assert differing >= 9


# -- readout / fuse ----------------------------------------------------------------


def test_readout_single_row_identity():
    row = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(readout(T.constant(row)).data, row)


def test_readout_opposite_rows_cancel():
    m = np.array([[1.0, 2.0], [-1.0, -2.0]])
    np.testing.assert_array_equal(readout(T.constant(m)).data, [[0.0, 0.0]])


def test_readout_permutation_invariant():
    m = _rng(6).standard_normal((5, 3))
    a = readout(T.constant(m)).data
    b = readout(T.constant(m[::-1])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_readout_empty_raises():
    with pytest.raises(EmptyInput):
        readout(T.constant(np.zeros((0, 3))))


def test_fuse_concat_and_roundtrip():
    a, b = np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])
    out = fuse(T.constant(a), T.constant(b))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0, 4.0]])
    np.testing.assert_array_equal(out.data[:, :2], a)
    np.testing.assert_array_equal(out.data[:, 2:], b)
    zero = fuse(T.constant(a), T.constant(np.zeros((1, 2))))
    np.testing.assert_array_equal(zero.data, [[1.0, 2.0, 0.0, 0.0]])
    with pytest.raises(T.ShapeMismatch):
        fuse(T.constant(np.ones((1, 2))), T.constant(np.ones((1, 3))))


# -- encode_view -------------------------------------------------------------------


def _params(cfg, seed=0):
    from mvmol.model import init_params

    return init_params(cfg, seed)


def test_encode_view_single_fragment_shares_semantics():
    mol = _prep("CCCC")  # no cleavable bonds -> one fragment
    frags = brics_fragment(mol)
    assert len(frags.fragments) == 1
    params = _params(CFG, 1)
    emb = encode_view(mol, frags, params, "2d", CFG)
    sem = emb.semantics.data
    for i in range(1, mol.n_atoms):
        np.testing.assert_array_equal(sem[i], sem[0])


def test_encode_view_fused_is_exact_concat():
    mol = _prep("CCOC(C)=O")
    frags = brics_fragment(mol)
    params = _params(CFG, 2)
    emb = encode_view(mol, frags, params, "2d", CFG)
    np.testing.assert_array_equal(
        emb.fused.data, np.concatenate([emb.context.data, emb.semantics.data], axis=1)
    )


def test_encode_view_k0_context_depends_only_on_own_features():
    cfg = ModelConfig(hidden=8, latent=4, proj=8, depth=2, k_hop=0)
    params = _params(cfg, 3)
    m1, m2 = _prep("CCO"), _prep("OCC")
    e1 = encode_view(m1, brics_fragment(m1), params, "2d", cfg)
    e2 = encode_view(m2, brics_fragment(m2), params, "2d", cfg)
    # atom 0 of CCO (C, degree 1) matches atom 2 of OCC by features
    np.testing.assert_allclose(e1.context.data[0], e2.context.data[2], atol=1e-12)


def test_encode_view_permutation_equivariance():
    rng = _rng(8)
    params = _params(CFG, 4)
    for _ in range(5):
        mol = molio.ensure_coords(datasets.random_molecule(rng))
        perm = list(rng.permutation(mol.n_atoms))
        pmol = permute_molecule(mol, perm)
        emb = encode_view(mol, brics_fragment(mol), params, "2d", CFG)
        pemb = encode_view(pmol, brics_fragment(pmol), params, "2d", CFG)
        for i in range(mol.n_atoms):
            assert np.abs(emb.fused.data[i] - pemb.fused.data[perm[i]]).max() < 1e-9


# -- posterior head ----------------------------------------------------------------


def test_posterior_zero_weights_mean_is_bias():
    rng = _rng(9)
    params = init_posterior_head(rng, "head2d", 6, 4)
    params["head2d.w_mu"].data[:] = 0.0
    params["head2d.b_mu"].data[:] = np.arange(4.0)
    p = posterior_head(T.constant(rng.standard_normal((1, 6))), params, "head2d")
    np.testing.assert_array_equal(p.mean.data, [[0.0, 1.0, 2.0, 3.0]])


def test_posterior_eval_sample_is_mean():
    rng = _rng(10)
    params = init_posterior_head(rng, "head2d", 6, 4)
    p = posterior_head(T.constant(rng.standard_normal((1, 6))), params, "head2d")
    np.testing.assert_array_equal(p.sample.data, p.mean.data)


def test_posterior_sampling_variance_matches_logvar():
    rng = _rng(11)
    params = init_posterior_head(rng, "head2d", 6, 2)
    x = T.constant(rng.standard_normal((1, 6)))
    draws = np.zeros((100_000, 2))
    ref = posterior_head(x, params, "head2d")
    eps = rng.standard_normal((100_000, 2))
    for k in range(2):
        std = np.exp(ref.logvar.data[0, k] / 2)
        draws[:, k] = ref.mean.data[0, k] + std * eps[:, k]
    var = draws.var(axis=0)
    np.testing.assert_allclose(var, np.exp(ref.logvar.data[0]), rtol=0.02)


def test_posterior_logvar_clamped():
    rng = _rng(12)
    params = init_posterior_head(rng, "head2d", 3, 2)
    params["head2d.b_lv"].data[:] = 50.0
    p = posterior_head(T.constant(np.zeros((1, 3))), params, "head2d")
    assert p.logvar.data.max() <= 8.0


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_roundtrip_and_byte_identity(tmp_path):
    from mvmol.model import init_params

    params = init_params(CFG, 7)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_params(p1, params)
    save_params(p2, params)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:4] == b"MVCB"
    loaded = load_params(p1)
    assert list(loaded) == list(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name].data)
