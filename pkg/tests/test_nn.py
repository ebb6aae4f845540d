"""Neural building blocks: conv3d, upsampling, trilinear sampling,
deformable conv, normalization, and the windowed attention block."""

import numpy as np
import pytest

from mamat import nn
from mamat import tensor as T
from mamat.tensor import ShapeError, Tape, Tensor, as_tensor, backward, finite_diff_check


def rand_t(shape, seed=0, dtype=np.float32, scale=1.0):
    rng = np.random.default_rng(seed)
    return as_tensor(rng.normal(scale=scale, size=shape), dtype=dtype)


def conv_params(ci, co, k, seed=0, stride=(1, 1, 1), dtype=np.float32, zero=False):
    if zero:
        w = T.tensor_new((co, ci, k, k, k), 0.0, dtype=dtype)
    else:
        w = rand_t((co, ci, k, k, k), seed, dtype, scale=0.3)
    b = T.tensor_new((co,), 0.0, dtype=dtype)
    return nn.Conv3dParams(w, b, stride=stride)


def deform_params(ci, co, seed=0, k=3, dtype=np.float32, offset_scale=0.0, offset_bias=0.0):
    main = conv_params(ci, co, k, seed, dtype=dtype)
    n_off = 3 * k**3
    rng = np.random.default_rng(seed + 1)
    if offset_scale:
        ow = as_tensor(rng.normal(scale=offset_scale, size=(n_off, ci, 3, 3, 3)), dtype=dtype)
        ob = as_tensor(np.full(n_off, offset_bias), dtype=dtype)
    else:
        ow = T.tensor_new((n_off, ci, 3, 3, 3), 0.0, dtype=dtype)
        ob = T.tensor_new((n_off,), offset_bias, dtype=dtype) if offset_bias else T.tensor_new(
            (n_off,), 0.0, dtype=dtype
        )
    return nn.DeformConv3dParams(main, nn.Conv3dParams(ow, ob))


class TestConv3d:
    def test_identity_kernel(self):
        x = rand_t((1, 3, 2, 4, 4))
        w = np.zeros((3, 3, 1, 1, 1), dtype=np.float32)
        for c in range(3):
            w[c, c, 0, 0, 0] = 1.0
        p = nn.Conv3dParams(Tensor(w), T.tensor_new((3,), 0.0))
        out = nn.conv3d(x, p)
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_interior_tap_count(self):
        x = T.tensor_new((1, 1, 5, 5, 5), 1.0)
        p = nn.Conv3dParams(T.tensor_new((1, 1, 3, 3, 3), 1.0), T.tensor_new((1,), 0.0))
        out = nn.conv3d(x, p)
        assert out.data[0, 0, 2, 2, 2] == 27.0

    def test_shape_arithmetic(self):
        x = rand_t((1, 3, 5, 8, 8))
        p = conv_params(3, 8, 3)
        assert nn.conv3d(x, p).shape == (1, 8, 5, 8, 8)

    def test_same_padding_preserves_extents(self):
        for k in (3, 5, 7):
            x = rand_t((1, 2, 5, 8, 8), seed=k)
            p = conv_params(2, 4, k)
            assert nn.conv3d(x, p).shape == (1, 4, 5, 8, 8)

    def test_stride2_downsample(self):
        x = rand_t((1, 4, 5, 16, 16))
        p = conv_params(4, 8, 3, stride=(1, 2, 2))
        assert nn.conv3d(x, p).shape == (1, 8, 5, 8, 8)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel"):
            nn.conv3d(rand_t((1, 2, 3, 4, 4)), conv_params(3, 4, 3))

    def test_gradcheck(self):
        x0 = rand_t((1, 2, 3, 4, 4), seed=5, dtype=np.float64)

        def f(p):
            conv = nn.Conv3dParams(p["w"], p["b"])
            out = nn.conv3d(p["x"], conv)
            return (out * out).mean()

        params = {
            "x": x0,
            "w": rand_t((3, 2, 3, 3, 3), 6, np.float64, 0.4),
            "b": rand_t((3,), 7, np.float64),
        }
        rep = finite_diff_check(f, params, eps=1e-5, max_coords=30)
        assert rep.max_rel_err < 1e-4, rep.per_param

    def test_stride2_gradcheck(self):
        def f(p):
            conv = nn.Conv3dParams(p["w"], p["b"], stride=(1, 2, 2))
            return (nn.conv3d(p["x"], conv) * 1.0).sum()

        params = {
            "x": rand_t((1, 2, 3, 4, 4), 8, np.float64),
            "w": rand_t((2, 2, 3, 3, 3), 9, np.float64, 0.4),
            "b": rand_t((2,), 10, np.float64),
        }
        rep = finite_diff_check(f, params, eps=1e-5, max_coords=30)
        assert rep.max_rel_err < 1e-4


class TestUpsample:
    def test_nearest_duplicates_blocks(self):
        x = as_tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 1, 2, 2))
        out = nn.upsample_nearest(x, (1, 2, 2))
        expect = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
        np.testing.assert_array_equal(out.data[0, 0, 0], expect)

    def test_upconv3d_shape(self):
        x = rand_t((1, 8, 5, 4, 4))
        p = deform_params(8, 4)
        assert nn.upconv3d(x, p, (1, 2, 2)).shape == (1, 4, 5, 8, 8)

    def test_upconv3d_identity(self):
        # scale 1, identity 1x1x1 main kernel, zero offsets
        x = rand_t((1, 2, 3, 4, 4), seed=3)
        w = np.zeros((2, 2, 1, 1, 1), dtype=np.float32)
        w[0, 0] = 1.0
        w[1, 1] = 1.0
        main = nn.Conv3dParams(Tensor(w), T.tensor_new((2,), 0.0))
        off = nn.Conv3dParams(T.tensor_new((3, 2, 3, 3, 3), 0.0), T.tensor_new((3,), 0.0))
        p = nn.DeformConv3dParams(main, off)
        out = nn.upconv3d(x, p, (1, 1, 1))
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)


class TestTrilinearSample:
    def test_lattice_point_exact(self):
        x = rand_t((3, 4, 5), seed=1)
        q = as_tensor([1.0, 2.0, 3.0])
        assert nn.trilinear_sample(x, q).item() == pytest.approx(float(x.data[1, 2, 3]))

    def test_cube_center(self):
        x = as_tensor(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        q = as_tensor([0.5, 0.5, 0.5])
        assert nn.trilinear_sample(x, q).item() == pytest.approx(3.5)

    def test_outside_is_zero(self):
        x = T.tensor_new((2, 2, 2), 7.0)
        assert nn.trilinear_sample(x, as_tensor([-3.0, 0.0, 0.0])).item() == 0.0
        assert nn.trilinear_sample(x, as_tensor([0.0, 5.0, 1.0])).item() == 0.0

    def test_linear_along_axis(self):
        x = rand_t((3, 3, 3), seed=2)
        for axis in range(3):
            q0 = np.array([1.0, 1.0, 1.0])
            q1 = q0.copy()
            q1[axis] += 1.0
            qm = q0.copy()
            qm[axis] += 0.5
            v0 = nn.trilinear_sample(x, as_tensor(q0)).item()
            v1 = nn.trilinear_sample(x, as_tensor(q1)).item()
            vm = nn.trilinear_sample(x, as_tensor(qm)).item()
            assert vm == pytest.approx((v0 + v1) / 2, abs=1e-6)

    def test_gradcheck_volume_and_coord(self):
        def f(p):
            return nn.trilinear_sample(p["x"], p["q"]) * 2.0

        params = {
            "x": rand_t((3, 4, 4), 4, np.float64),
            "q": as_tensor([1.3, 2.4, 1.7], dtype=np.float64),
        }
        rep = finite_diff_check(f, params, eps=1e-5)
        assert rep.max_rel_err < 1e-4


class TestDeformConv3d:
    def test_zero_offsets_match_conv3d(self):
        # The initialized state reduces exactly to the plain convolution.
        for seed in range(20):
            x = rand_t((1, 2, 3, 6, 6), seed=seed)
            p = deform_params(2, 3, seed=seed + 100)
            plain = nn.conv3d(x, p.main)
            deformed = nn.deform_conv3d(x, p)
            assert np.max(np.abs(plain.data - deformed.data)) < 1e-6

    def test_single_tap_probe(self):
        # One nonzero center tap, constant offset (0, 0.5, 0): the output is
        # the even blend of the voxel with its +y neighbor.
        x = rand_t((1, 1, 3, 6, 6), seed=11)
        w = np.zeros((1, 1, 3, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1, 1] = 1.0  # center tap
        main = nn.Conv3dParams(Tensor(w), T.tensor_new((1,), 0.0))
        ob = np.zeros(81, dtype=np.float32)
        center_tap = 13  # lexicographic index of (0, 0, 0) in the 3x3x3 grid
        ob[3 * center_tap + 1] = 0.5  # dy component
        off = nn.Conv3dParams(T.tensor_new((81, 1, 3, 3, 3), 0.0), Tensor(ob))
        p = nn.DeformConv3dParams(main, off)
        out = nn.deform_conv3d(x, p)
        xd = x.data[0, 0]
        blend = 0.5 * (xd[1, 2, 3] + xd[1, 3, 3])
        assert out.data[0, 0, 1, 2, 3] == pytest.approx(blend, abs=1e-6)

    def test_shape_arithmetic(self):
        x = rand_t((1, 3, 5, 16, 16))
        p = deform_params(3, 6)
        assert nn.deform_conv3d(x, p).shape == (1, 6, 5, 16, 16)

    def test_gradcheck_all_inputs(self):
        # Offset bias pushes sampling coordinates off the interpolation
        # kinks at integer positions so central differences are valid.
        def f(p):
            main = nn.Conv3dParams(p["mw"], p["mb"])
            off = nn.Conv3dParams(p["ow"], p["ob"])
            dp = nn.DeformConv3dParams(main, off)
            out = nn.deform_conv3d(p["x"], dp)
            return (out * out).mean()

        params = {
            "x": rand_t((1, 2, 3, 4, 4), 21, np.float64),
            "mw": rand_t((2, 2, 3, 3, 3), 22, np.float64, 0.4),
            "mb": rand_t((2,), 23, np.float64),
            "ow": rand_t((81, 2, 3, 3, 3), 24, np.float64, 0.01),
            "ob": as_tensor(np.full(81, 0.37), dtype=np.float64),
        }
        rep = finite_diff_check(f, params, eps=1e-5, max_coords=25)
        assert rep.max_rel_err < 1e-4, rep.per_param


class TestBatchNorm:
    def make_params(self, c, dtype=np.float32, eps=1e-5):
        return nn.NormParams(
            gamma=T.tensor_new((c,), 1.0, dtype=dtype),
            beta=T.tensor_new((c,), 0.0, dtype=dtype),
            running_mean=T.tensor_new((c,), 0.0, dtype=dtype),
            running_var=T.tensor_new((c,), 1.0, dtype=dtype),
            eps=eps,
        )

    def test_constant_channel_gives_beta(self):
        p = self.make_params(2)
        p = nn.NormParams(p.gamma, as_tensor([0.5, -1.0]), p.running_mean, p.running_var)
        x = T.tensor_new((1, 2, 3, 4, 4), 7.0)
        out = nn.batchnorm3d(x, p, "train")
        np.testing.assert_allclose(out.data[0, 0], 0.5, atol=1e-6)
        np.testing.assert_allclose(out.data[0, 1], -1.0, atol=1e-6)

    def test_standardized_input_unchanged(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(size=(1, 2, 4, 8, 8))
        raw -= raw.mean(axis=(0, 2, 3, 4), keepdims=True)
        raw /= raw.std(axis=(0, 2, 3, 4), keepdims=True)
        raw = raw.astype(np.float32)
        x = Tensor(raw)
        # eps adds a (1 - eps/2) scale bias, so keep it below the tolerance
        out = nn.batchnorm3d(x, self.make_params(2, eps=1e-9), "train")
        np.testing.assert_allclose(out.data, raw, atol=1e-5)

    def test_infer_mode_pure(self):
        p = self.make_params(2)
        x = rand_t((1, 2, 3, 4, 4), seed=9)
        out1 = nn.batchnorm3d(x, p, "infer")
        mean_before = p.running_mean.data.copy()
        out2 = nn.batchnorm3d(x, p, "infer")
        np.testing.assert_array_equal(out1.data, out2.data)
        np.testing.assert_array_equal(p.running_mean.data, mean_before)

    def test_train_updates_running_stats(self):
        p = self.make_params(1)
        x = T.tensor_new((1, 1, 2, 4, 4), 4.0)
        nn.batchnorm3d(x, p, "train")
        assert p.running_mean.data[0] == pytest.approx(0.4)  # 0.9*0 + 0.1*4

    def test_gradcheck(self):
        x0 = rand_t((2, 2, 2, 3, 3), 31, np.float64)
        # random linear probe keeps per-coordinate gradients away from
        # accidental cancellation, where the rel-err floor dominates
        probe = rand_t(x0.shape, 34, np.float64)

        def f(p):
            norm = nn.NormParams(
                p["g"], p["b"],
                T.tensor_new((2,), 0.0, dtype=np.float64),
                T.tensor_new((2,), 1.0, dtype=np.float64),
            )
            out = nn.batchnorm3d(p["x"], norm, "train")
            return (out * probe).mean() + (out * out).mean()

        params = {"x": x0, "g": rand_t((2,), 32, np.float64), "b": rand_t((2,), 33, np.float64)}
        rep = finite_diff_check(f, params, eps=1e-5, max_coords=40)
        assert rep.max_rel_err < 1e-4


def attn_params(d, heads=2, seed=0, dtype=np.float32, zero_out=True):
    rng = np.random.default_rng(seed)

    def lin(shape, scale=0.3):
        return as_tensor(rng.normal(scale=scale, size=shape), dtype=dtype)

    zeros = lambda shape: T.tensor_new(shape, 0.0, dtype=dtype)
    return nn.AttnBlockParams(
        norm1_gamma=T.tensor_new((d,), 1.0, dtype=dtype),
        norm1_beta=zeros((d,)),
        wq=lin((d, d)),
        bq=zeros((d,)),
        wk=lin((d, d)),
        bk=zeros((d,)),
        wv=lin((d, d)),
        bv=zeros((d,)),
        wo=zeros((d, d)) if zero_out else lin((d, d)),
        bo=zeros((d,)),
        norm2_gamma=T.tensor_new((d,), 1.0, dtype=dtype),
        norm2_beta=zeros((d,)),
        mlp1_w=lin((d, 2 * d)),
        mlp1_b=zeros((2 * d,)),
        mlp2_w=zeros((2 * d, d)) if zero_out else lin((2 * d, d)),
        mlp2_b=zeros((d,)),
        heads=heads,
    )


class TestAttnBlock:
    def test_zero_output_projections_identity(self):
        x = rand_t((1, 8, 16, 16), seed=41)
        out = nn.attn_block(x, attn_params(8), window=8)
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_attention_rows_sum_to_one(self):
        x = rand_t((1, 8, 16, 16), seed=42)
        collect = {}
        nn.attn_block(x, attn_params(8, zero_out=False, seed=5), window=8, collect=collect)
        attn = collect["attn"]
        assert attn.shape == (4, 2, 64, 64)  # 4 windows, 2 heads, 64 tokens
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)

    def test_output_shape(self):
        x = rand_t((1, 8, 16, 16), seed=43)
        out = nn.attn_block(x, attn_params(8, zero_out=False), window=8)
        assert out.shape == (1, 8, 16, 16)

    def test_head_divisibility_enforced(self):
        with pytest.raises(ShapeError):
            attn_params(5, heads=2)

    def test_window_divisibility_enforced(self):
        with pytest.raises(ShapeError):
            nn.attn_block(rand_t((1, 8, 12, 12)), attn_params(8), window=8)

    def test_gradcheck(self):
        x0 = rand_t((1, 4, 4, 4), 51, np.float64)

        def f(p):
            blk = nn.AttnBlockParams(
                norm1_gamma=p["g1"], norm1_beta=p["b1"],
                wq=p["wq"], bq=p["bq"], wk=p["wk"], bk=p["bk"],
                wv=p["wv"], bv=p["bv"], wo=p["wo"], bo=p["bo"],
                norm2_gamma=p["g2"], norm2_beta=p["b2"],
                mlp1_w=p["m1w"], mlp1_b=p["m1b"], mlp2_w=p["m2w"], mlp2_b=p["m2b"],
                heads=2,
            )
            out = nn.attn_block(p["x"], blk, window=2)
            return (out * out).mean()

        rng = np.random.default_rng(52)
        lin = lambda s, sc=0.4: as_tensor(rng.normal(scale=sc, size=s), dtype=np.float64)
        params = {
            "x": x0,
            "g1": lin((4,)), "b1": lin((4,)), "g2": lin((4,)), "b2": lin((4,)),
            "wq": lin((4, 4)), "bq": lin((4,)), "wk": lin((4, 4)), "bk": lin((4,)),
            "wv": lin((4, 4)), "bv": lin((4,)), "wo": lin((4, 4)), "bo": lin((4,)),
            "m1w": lin((4, 8)), "m1b": lin((8,)), "m2w": lin((8, 4)), "m2b": lin((4,)),
        }
        rep = finite_diff_check(f, params, eps=1e-5, max_coords=12)
        assert rep.max_rel_err < 1e-4, rep.per_param
