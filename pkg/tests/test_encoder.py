import math

import numpy as np
import pytest

from patchseg import encoder as E
from patchseg import tensor as T
from patchseg.errors import ConfigError, ShapeError
from patchseg.tensor import Tensor


def micro_cfg(**kw):
    defaults = dict(image_size=(16, 16), patch_size=8, depth=2, token_size=8, heads=2)
    defaults.update(kw)
    return E.EncoderConfig(**defaults)


def test_config_validation():
    with pytest.raises(ConfigError):
        E.EncoderConfig(image_size=(30, 32), patch_size=16, depth=1, token_size=8, heads=2)
    with pytest.raises(ConfigError):
        E.EncoderConfig(image_size=(32, 32), patch_size=16, depth=1, token_size=9, heads=2)
    cfg = E.EncoderConfig(image_size=(64, 32), patch_size=16, depth=1, token_size=64, heads=1)
    assert cfg.grid == (4, 2) and cfg.n_tokens == 8 and cfg.head_dim == 64


def test_patchify_shape_law():
    img = Tensor(np.zeros((32, 32, 3)))
    out = E.patchify(img, 16)
    assert out.shape == (4, 768)


def test_patchify_single_patch_is_flat_image():
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((8, 8, 3)).astype(np.float32)
    out = E.patchify(Tensor(arr), 8)
    np.testing.assert_array_equal(out.data, arr.reshape(1, -1))


def test_patchify_roundtrip_exact():
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((24, 16, 3)).astype(np.float32)
    patches = E.patchify(Tensor(arr), 8)
    back = E.unpatchify(patches, (3, 2), 8, 3)
    np.testing.assert_array_equal(back.data, arr)


def test_patchify_row_major_patch_order():
    # patch (0,1) of a 2x2 grid must cover columns P..2P of the top rows
    p = 4
    arr = np.zeros((8, 8, 1), dtype=np.float32)
    arr[0, 5, 0] = 9.0
    patches = E.patchify(Tensor(arr), p)
    assert patches.data[1].sum() == 9.0  # second patch in row-major grid order
    # inside the patch: (y=0, x=1, c=0) -> flat index 0*4*1 + 1*1 + 0
    assert patches.data[1, 1] == 9.0


def test_patchify_indivisible_rejected():
    with pytest.raises(ShapeError, match="pad"):
        E.patchify(Tensor(np.zeros((10, 8, 3))), 4)


def test_embed_zero_image_gives_pos():
    cfg = micro_cfg()
    params = E.EncoderParams(cfg, np.random.default_rng(2))
    patches = E.patchify(Tensor(np.zeros((16, 16, 3), dtype=np.float32)), 8)
    z0 = E.embed(patches, params)
    np.testing.assert_array_equal(z0.data, params.pos.data)


def test_embed_linear_in_projection():
    cfg = micro_cfg()
    rng = np.random.default_rng(3)
    params = E.EncoderParams(cfg, rng)
    img = Tensor(rng.standard_normal((16, 16, 3)).astype(np.float32))
    patches = E.patchify(img, 8)
    z1 = E.embed(patches, params).data - params.pos.data
    params.patch_weight.data *= 2.0
    z2 = E.embed(patches, params).data - params.pos.data
    np.testing.assert_allclose(z2, 2 * z1, rtol=1e-5)


def test_embed_requires_matching_pos_rows():
    cfg = micro_cfg()
    params = E.EncoderParams(cfg, np.random.default_rng(4))
    patches = E.patchify(Tensor(np.zeros((32, 32, 3), dtype=np.float32)), 8)  # 16 patches, pos has 4
    with pytest.raises(ShapeError, match="interpolate_pos"):
        E.embed(patches, params)


def test_interpolate_pos_identity_bit_identical():
    pos = np.random.default_rng(5).standard_normal((6, 4)).astype(np.float32)
    out = E.interpolate_pos(pos, (2, 3), (2, 3))
    assert out is pos


def test_interpolate_pos_constant_stays_constant():
    pos = np.full((4, 3), 1.25, dtype=np.float32)
    out = E.interpolate_pos(pos, (2, 2), (5, 7))
    assert out.shape == (35, 3)
    np.testing.assert_allclose(out, 1.25, atol=1e-6)


def test_interpolate_pos_matches_sampling_formula():
    # 2x2 grid to 4x4: compare against direct evaluation of the half-pixel formula
    rng = np.random.default_rng(6)
    pos = rng.standard_normal((4, 3))
    grid = pos.reshape(2, 2, 3)
    expected = np.zeros((4, 4, 3))
    for i in range(4):
        for j in range(4):
            sy = (i + 0.5) * 2 / 4 - 0.5
            sx = (j + 0.5) * 2 / 4 - 0.5
            y0, x0 = math.floor(sy), math.floor(sx)
            fy, fx = sy - y0, sx - x0
            y0c, y1c = min(max(y0, 0), 1), min(max(y0 + 1, 0), 1)
            x0c, x1c = min(max(x0, 0), 1), min(max(x0 + 1, 0), 1)
            expected[i, j] = (
                grid[y0c, x0c] * (1 - fy) * (1 - fx)
                + grid[y0c, x1c] * (1 - fy) * fx
                + grid[y1c, x0c] * fy * (1 - fx)
                + grid[y1c, x1c] * fy * fx
            )
    out = E.interpolate_pos(pos, (2, 2), (4, 4))
    np.testing.assert_allclose(out, expected.reshape(16, 3), atol=1e-12)


def _zeroed_layer(cfg, rng):
    return E.LayerParams(cfg, rng, dtype=np.float64, init="zeros")


def test_msa_zero_queries_give_uniform_attention():
    cfg = micro_cfg(token_size=8, heads=2)
    rng = np.random.default_rng(7)
    lp = _zeroed_layer(cfg, rng)
    lp.wv.data = rng.standard_normal(lp.wv.shape)
    lp.wo.data = np.eye(8)
    z = Tensor(rng.standard_normal((5, 8)), dtype=np.float64)
    trace = E.ForwardTrace()
    out = E.msa(z, lp, heads=2, trace=trace)
    for attn in trace.attention[0]:
        np.testing.assert_allclose(attn, 1 / 5, atol=1e-12)
    v = z.data @ lp.wv.data
    np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (5, 1)), atol=1e-12)


def test_msa_single_token():
    cfg = micro_cfg(token_size=8, heads=2)
    rng = np.random.default_rng(8)
    lp = _zeroed_layer(cfg, rng)
    for w in (lp.wq, lp.wk, lp.wv, lp.wo):
        w.data = rng.standard_normal(w.shape)
    z = Tensor(rng.standard_normal((1, 8)), dtype=np.float64)
    trace = E.ForwardTrace()
    out = E.msa(z, lp, heads=2, trace=trace)
    for attn in trace.attention[0]:
        np.testing.assert_array_equal(attn, [[1.0]])
    np.testing.assert_allclose(out.data, (z.data @ lp.wv.data) @ lp.wo.data, atol=1e-12)


def test_msa_attention_rows_sum_to_one():
    cfg = micro_cfg(token_size=8, heads=2)
    rng = np.random.default_rng(9)
    lp = E.LayerParams(cfg, rng, dtype=np.float32)
    z = Tensor(rng.standard_normal((7, 8)).astype(np.float32))
    trace = E.ForwardTrace()
    E.msa(z, lp, heads=2, trace=trace)
    for attn in trace.attention[0]:
        np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-6)


def test_forward_train_eval_agree_with_zero_rates():
    cfg = micro_cfg()
    rng = np.random.default_rng(10)
    params = E.EncoderParams(cfg, rng)
    z0 = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    with T.no_grad():
        a = E.encoder_forward(z0, params, cfg, mode="train", rng=np.random.default_rng(0))
        b = E.encoder_forward(z0, params, cfg, mode="eval")
    np.testing.assert_array_equal(a.data, b.data)


def test_forward_full_stochastic_depth_is_final_ln_of_input():
    cfg = micro_cfg(stochastic_depth_rate=1.0)
    rng = np.random.default_rng(11)
    params = E.EncoderParams(cfg, rng)
    z0 = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    with T.no_grad():
        out = E.encoder_forward(z0, params, cfg, mode="train", rng=np.random.default_rng(1))
        expected = T.layer_norm(z0, params.final_gain, params.final_bias, E.LAYER_NORM_EPS)
    np.testing.assert_array_equal(out.data, expected.data)


def test_forward_output_shape_and_eval_determinism():
    cfg = micro_cfg(dropout_rate=0.3, stochastic_depth_rate=0.2)
    rng = np.random.default_rng(12)
    params = E.EncoderParams(cfg, rng)
    z0 = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    with T.no_grad():
        a = E.encoder_forward(z0, params, cfg, mode="eval")
        b = E.encoder_forward(z0, params, cfg, mode="eval")
    assert a.shape == (4, 8)
    np.testing.assert_array_equal(a.data, b.data)


def test_forward_train_requires_rng():
    cfg = micro_cfg()
    params = E.EncoderParams(cfg, np.random.default_rng(13))
    with pytest.raises(ConfigError, match="rng"):
        E.encoder_forward(Tensor(np.zeros((4, 8), dtype=np.float32)), params, cfg, mode="train")


def test_permutation_equivariance():
    # permuting tokens and position rows identically permutes the output rows
    cfg = micro_cfg(depth=2)
    rng = np.random.default_rng(14)
    params = E.EncoderParams(cfg, rng, dtype=np.float64)
    img = rng.standard_normal((16, 16, 3))
    patches = E.patchify(Tensor(img, dtype=np.float64), 8)
    with T.no_grad():
        base = E.encoder_forward(E.embed(patches, params), params, cfg).data
        perm = np.array([2, 0, 3, 1])
        params.pos.data = params.pos.data[perm]
        shuffled = Tensor(patches.data[perm], dtype=np.float64)
        out = E.encoder_forward(E.embed(shuffled, params), params, cfg).data
    np.testing.assert_allclose(out, base[perm], atol=1e-10)


def test_parameter_count_closed_form_matches_actual():
    for cfg in (micro_cfg(), micro_cfg(depth=3, token_size=16, heads=4, patch_size=4)):
        params = E.EncoderParams(cfg, np.random.default_rng(15), init="zeros")
        actual = sum(t.data.size for _, t in params.named())
        assert actual == E.parameter_count(cfg)


def test_seg_ti_parameter_count_near_6m():
    cfg = E.EncoderConfig(image_size=(512, 512), patch_size=16, depth=12, token_size=192, heads=3)
    count = E.parameter_count(cfg)
    assert abs(count - 6e6) / 6e6 < 0.15


def test_stochastic_depth_drop_frequency():
    # 10k branch decisions at rate 0.1 should land within +/- 0.02
    cfg = E.EncoderConfig(image_size=(8, 8), patch_size=8, depth=5, token_size=8, heads=2,
                          stochastic_depth_rate=0.1)
    params = E.EncoderParams(cfg, np.random.default_rng(16))
    z0 = Tensor(np.zeros((2, 8), dtype=np.float32))
    rng = np.random.default_rng(17)
    trace = E.ForwardTrace()
    with T.no_grad():
        for _ in range(1000):
            E.encoder_forward(z0, params, cfg, mode="train", rng=rng, trace=trace)
    drops = np.array(trace.branch_drops)
    assert drops.size == 10000
    assert abs(drops.mean() - 0.1) <= 0.02
