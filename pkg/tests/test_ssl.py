import math
from collections import deque
from pathlib import Path

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakmil.core import ParamSet, grad_check
from weakmil.exceptions import ConfigurationError, ContractError, DatasetError, FormatError
from weakmil.preprocess import PatchGrid, PatchRecord
from weakmil.ssl import (
    AugmentationConfig,
    EncoderArch,
    EncoderState,
    MoCoEncoder,
    MoCoHyper,
    NegativeQueue,
    augment,
    augment_pair,
    encode,
    encode_numpy,
    info_nce,
    init_encoder,
    load_encoder,
    momentum_update,
    per_slide_quota,
    prepare_input,
    sample_ssl_dataset,
    save_encoder,
    train_ssl,
)
from weakmil.ssl.moco import dumps_encoder, loads_encoder
from weakmil.synthgen import SlideRecord

SMALL = EncoderArch(channels=(4, 4, 4), head_hidden=8, feature_dim=8)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def mp_info_nce(q, k, negs, tau):
    mpmath.mp.dps = 50
    pos = mpmath.exp(mpmath.fsum(mpmath.mpf(a) * mpmath.mpf(b) for a, b in zip(q, k)) / tau)
    den = pos
    for n in negs:
        den += mpmath.exp(mpmath.fsum(mpmath.mpf(a) * mpmath.mpf(b) for a, b in zip(q, n)) / tau)
    return -mpmath.log(pos / den)


# -- augmentation -------------------------------------------------------------


class TestAugment:
    def test_identity_config_is_identity(self):
        rng = np.random.default_rng(0)
        patch = rng.uniform(0, 255, size=(16, 16, 3))
        out = augment(patch, AugmentationConfig.identity(), rng)
        np.testing.assert_array_equal(out, patch)

    def test_rotation_only_permutes_pixels(self):
        rng = np.random.default_rng(1)
        patch = rng.integers(0, 256, size=(12, 12, 3)).astype(float)
        cfg = AugmentationConfig(rotations=(90,), hflip_p=0.0, vflip_p=0.0, brightness=0.0,
                                 contrast=0.0, saturation=0.0, blur_p=0.0)
        out = augment(patch, cfg, rng)
        np.testing.assert_array_equal(out, np.rot90(patch, 1, axes=(0, 1)))

    def test_deterministic_given_seed(self):
        patch = np.random.default_rng(2).uniform(0, 255, size=(32, 32, 3))
        a = augment_pair(patch, AugmentationConfig(), np.random.default_rng(5))
        b = augment_pair(patch, AugmentationConfig(), np.random.default_rng(5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_output_in_pixel_range(self):
        rng = np.random.default_rng(3)
        patch = rng.uniform(0, 255, size=(32, 32, 3))
        for _ in range(20):
            out = augment(patch, AugmentationConfig(brightness=1.0, contrast=1.0), rng)
            assert out.min() >= 0.0 and out.max() <= 255.0

    def test_invalid_probability(self):
        with pytest.raises(ConfigurationError):
            AugmentationConfig(hflip_p=1.5)


# -- encoder ------------------------------------------------------------------


class TestEncoder:
    def test_features_are_unit_norm(self):
        rng = np.random.default_rng(0)
        params = init_encoder(EncoderArch(), rng)
        out = encode(params, rng.uniform(0, 255, size=(5, 32, 32, 3))).data
        assert out.shape == (5, 64)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_encode_numpy_chunking_matches_single_pass(self):
        rng = np.random.default_rng(1)
        params = init_encoder(SMALL, rng)
        x = rng.uniform(0, 255, size=(7, 8, 8, 3))
        np.testing.assert_allclose(encode_numpy(params, x, chunk=3), encode(params, x).data, atol=1e-14)

    def test_prepare_input_box_and_bilinear(self):
        x = np.full((2, 224, 224, 3), 100, dtype=np.uint8)
        assert prepare_input(x, 32).shape == (2, 32, 32, 3)
        np.testing.assert_allclose(prepare_input(x, 32), 100.0)
        assert prepare_input(np.zeros((1, 30, 30, 3)), 32).shape == (1, 32, 32, 3)
        assert prepare_input(np.zeros((0, 224, 224, 3)), 32).shape == (0, 32, 32, 3)

    def test_mean_feature_gradient(self):
        rng = np.random.default_rng(2)
        params = init_encoder(SMALL, rng)
        x = rng.uniform(0, 255, size=(2, 8, 8, 3))
        w = rng.normal(size=8)
        assert grad_check(lambda t: (encode(t, x).mean(axis=0) * w).sum(), params) < 1e-4


# -- InfoNCE ------------------------------------------------------------------


class TestInfoNce:
    def test_empty_queue_is_exactly_zero(self):
        rng = np.random.default_rng(0)
        q, k = unit_rows(rng, 1, 8), unit_rows(rng, 1, 8)
        assert info_nce(q, k, NegativeQueue(4, 8), 0.07).data == 0.0

    def test_equal_similarities_give_log_k_plus_one(self):
        q = np.array([1.0, 0.0])
        k = np.array([0.6, 0.8])
        negs = np.array([[0.6, -0.8], [0.6, 0.8]])
        assert abs(float(info_nce(q, k, negs, 0.07).data) - math.log(3)) < 1e-10

    def test_hand_case(self):
        q = np.array([1.0, 0.0, 0.0])
        k = np.array([1.0, 0.0, 0.0])
        negs = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        expected = -math.log(math.e / (math.e + 2))
        assert abs(float(info_nce(q, k, negs, 1.0).data) - expected) < 1e-12
        assert abs(expected - 0.5514) < 1e-4

    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            d, m = rng.integers(2, 9), rng.integers(1, 12)
            tau = float(rng.uniform(0.05, 1.0))
            q, k, negs = unit_rows(rng, 1, d)[0], unit_rows(rng, 1, d)[0], unit_rows(rng, m, d)
            got = float(info_nce(q, k, negs, tau).data)
            assert abs(got - float(mp_info_nce(q, k, negs, tau))) < 1e-10

    def test_batch_is_mean_of_rows(self):
        rng = np.random.default_rng(2)
        q, k, negs = unit_rows(rng, 4, 6), unit_rows(rng, 4, 6), unit_rows(rng, 5, 6)
        rows = [float(info_nce(q[i], k[i], negs, 0.2).data) for i in range(4)]
        assert abs(float(info_nce(q, k, negs, 0.2).data) - np.mean(rows)) < 1e-12

    def test_gradient_flows_to_query_only(self):
        from weakmil.core import Tensor

        rng = np.random.default_rng(3)
        q = Tensor(unit_rows(rng, 2, 4), requires_grad=True)
        k = Tensor(unit_rows(rng, 2, 4), requires_grad=True)
        info_nce(q, k, unit_rows(rng, 4, 4), 0.5).backward()
        assert q.grad is not None and k.grad is None

    def test_non_unit_input_rejected(self):
        with pytest.raises(ContractError):
            info_nce(np.array([2.0, 0.0]), np.array([1.0, 0.0]), np.zeros((0, 2)), 0.1)

    def test_directional_monotonicity(self):
        # loss falls as q.k+ rises and rises with each q.k-
        from weakmil.core.tensor import log_softmax

        def loss(pos, negs, tau):
            logits = np.concatenate([[pos], negs]) / tau
            return -float(log_softmax(logits[None], axis=1).data[0, 0])

        rng = np.random.default_rng(4)
        for _ in range(100):
            pos, negs = rng.uniform(-1, 1), rng.uniform(-1, 1, size=5)
            base = loss(pos, negs, 0.3)
            assert base >= 0.0
            assert loss(pos + 1e-3, negs, 0.3) < base
            bumped = negs.copy()
            bumped[rng.integers(5)] += 1e-3
            assert loss(pos, bumped, 0.3) > base

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_temperature_monotone_when_positive_wins(self, seed):
        rng = np.random.default_rng(seed)
        q, k, negs = unit_rows(rng, 1, 4)[0], unit_rows(rng, 1, 4)[0], unit_rows(rng, 3, 4)
        if q @ k <= (negs @ q).max() + 1e-3:
            k = q
            if q @ k <= (negs @ q).max() + 1e-3:
                return
        taus = [1.0, 0.5, 0.2, 0.1, 0.05]
        losses = [float(info_nce(q, k, negs, t).data) for t in taus]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_full_encoder_gradient(self):
        rng = np.random.default_rng(5)
        params = init_encoder(SMALL, rng)
        x = rng.uniform(0, 255, size=(2, 8, 8, 3))
        k, negs = unit_rows(rng, 2, 8), unit_rows(rng, 6, 8)
        assert grad_check(lambda t: info_nce(encode(t, x), k, negs, 0.07), params) < 1e-4


# -- queue --------------------------------------------------------------------


class TestQueue:
    def test_fifo_eviction(self):
        q = NegativeQueue(4, 2)
        e = np.eye(2)
        a, b, c, d, e_, f = e[0], e[1], -e[0], -e[1], e[0] * 0.6 + e[1] * 0.8, e[0] * 0.8 - e[1] * 0.6
        q.enqueue([a, b])
        assert q.fill == 2
        q.enqueue([c, d]).enqueue([e_, f])
        np.testing.assert_array_equal(q.ordered(), [c, d, e_, f])

    def test_matches_reference_ring(self):
        rng = np.random.default_rng(0)
        for cap in (4, 8, 12):
            divisors = [b for b in range(1, cap + 1) if cap % b == 0]
            q = NegativeQueue(cap, 3)
            ref = deque(maxlen=cap)
            for _ in range(300):
                keys = unit_rows(rng, int(rng.choice(divisors)), 3)
                q.enqueue(keys)
                ref.extend(keys)
                np.testing.assert_array_equal(q.ordered(), np.array(ref))

    def test_contracts(self):
        q = NegativeQueue(4, 2)
        with pytest.raises(ContractError):
            q.enqueue([[3.0, 0.0]])
        with pytest.raises(ContractError):
            q.enqueue(np.tile([1.0, 0.0], (3, 1)))
        with pytest.raises(ContractError):
            q.enqueue([[1.0, 0.0, 0.0]])


# -- momentum -----------------------------------------------------------------


class TestMomentum:
    def _pair(self, seed):
        rng = np.random.default_rng(seed)
        return init_encoder(SMALL, rng), init_encoder(SMALL, rng)

    def test_identity_and_copy(self):
        k, q = self._pair(0)
        start = k.copy()
        for _ in range(100):
            k = momentum_update(k, q, 1.0)
        assert k.equal(start)
        assert momentum_update(k, q, 0.0).equal(q)

    def test_scalar_case(self):
        out = momentum_update(ParamSet({"w": np.array(1.0)}), ParamSet({"w": np.array(0.0)}), 0.999)
        assert out["w"] == 0.999

    def test_formula(self):
        k, q = self._pair(1)
        m = 0.73
        out = momentum_update(k, q, m)
        for name in k:
            np.testing.assert_allclose(out[name], m * k[name] + (1 - m) * q[name], atol=1e-15, rtol=0)

    def test_shape_mismatch(self):
        from weakmil.exceptions import DimensionError

        with pytest.raises(DimensionError):
            momentum_update(ParamSet({"w": np.zeros(2)}), ParamSet({"w": np.zeros(3)}), 0.5)


# -- sampling -----------------------------------------------------------------


def _cohort(kept_counts, labels):
    manifest = [SlideRecord(f"s{i}", Path(f"s{i}.png"), lab) for i, lab in enumerate(labels)]
    grids = {}
    for i, n in enumerate(kept_counts):
        recs = [PatchRecord(r, c, (r * 10 + c) < n, "" if (r * 10 + c) < n else "low_tissue")
                for r in range(10) for c in range(10)]
        grids[f"s{i}"] = PatchGrid(f"s{i}", 224, 224, recs)
    return manifest, grids


class TestSampling:
    def test_quota_arithmetic(self):
        assert per_slide_quota(240_000, 120) == 2000
        manifest, grids = _cohort([60] * 60, [0, 1] * 30)
        assert len(sample_ssl_dataset(manifest, grids, 50)) == 3000

    def test_clamps_without_duplicates(self):
        manifest, grids = _cohort([10, 70], [0, 1])
        refs = sample_ssl_dataset(manifest, grids, 50)
        s0 = [(r.row, r.col) for r in refs if r.slide_id == "s0"]
        assert len(s0) == 10 and len(set(s0)) == 10

    def test_balances_classes(self):
        manifest, grids = _cohort([5] * 5, [0, 0, 0, 1, 1])
        refs = sample_ssl_dataset(manifest, grids, 5)
        assert len({r.slide_id for r in refs}) == 4

    def test_only_kept_patches(self):
        manifest, grids = _cohort([7, 7], [0, 1])
        for r in sample_ssl_dataset(manifest, grids, 50, seed=3):
            assert (r.row, r.col) in grids[r.slide_id].kept_coords()

    def test_empty_class(self):
        manifest, grids = _cohort([5, 5], [1, 1])
        with pytest.raises(DatasetError):
            sample_ssl_dataset(manifest, grids, 5)


# -- training -----------------------------------------------------------------

TINY = MoCoHyper(epochs=2, queue_size=8, batch_size=4, feature_dim=8, input_px=8,
                 channels=(4, 4, 4), head_hidden=8)


def _tiny_data(seed=0, n=16):
    return np.random.default_rng(seed).uniform(0, 255, size=(n, 8, 8, 3))


class TestTrainSsl:
    def test_zero_epochs_keeps_initialization(self):
        init = EncoderState.initial(TINY.arch, np.random.default_rng(0))
        out = train_ssl(_tiny_data(), MoCoHyper(**{**TINY.__dict__, "epochs": 0}), state=init)
        assert out.query.equal(init.query) and out.loss_history == []

    def test_identity_momentum_freezes_key(self):
        hyper = MoCoHyper(**{**TINY.__dict__, "momentum": 1.0})
        init = EncoderState.initial(hyper.arch, np.random.default_rng(1))
        out = train_ssl(_tiny_data(), hyper, state=init)
        assert out.key.equal(init.key)
        assert not out.query.equal(init.query)

    def test_deterministic(self):
        a = train_ssl(_tiny_data(), TINY, seed=4)
        b = train_ssl(_tiny_data(), TINY, seed=4)
        assert a.query.equal(b.query) and a.key.equal(b.key)
        assert a.loss_history == b.loss_history and len(a.loss_history) == 2

    def test_empty_dataset(self):
        with pytest.raises(DatasetError):
            train_ssl(np.zeros((0, 8, 8, 3)), TINY)

    def test_invalid_hyper(self):
        with pytest.raises(ConfigurationError):
            MoCoHyper(queue_size=100, batch_size=32)
        with pytest.raises(ConfigurationError):
            MoCoHyper(temperature=0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        state = train_ssl(_tiny_data(), TINY, seed=0)
        save_encoder(tmp_path / "enc.bin", state)
        back = load_encoder(tmp_path / "enc.bin")
        assert back.query.equal(state.query) and back.key.equal(state.key)
        assert (tmp_path / "enc.bin").read_bytes()[:4] == b"MOCO"

    def test_truncation_and_magic(self):
        blob = dumps_encoder(EncoderState.initial(SMALL, np.random.default_rng(0)))
        for cut in (3, 5, 9, len(blob) - 1):
            with pytest.raises(FormatError, match="offset"):
                loads_encoder(blob[:cut])
        with pytest.raises(FormatError):
            loads_encoder(b"WMIL" + blob[4:])
        with pytest.raises(FormatError):
            loads_encoder(blob[:4] + b"\x09\x00" + blob[6:])


class TestEstimator:
    def test_fit_transform(self):
        est = MoCoEncoder(feature_dim=8, epochs=1, queue_size=8, batch_size=4, input_px=8,
                          channels=(4, 4, 4), head_hidden=8)
        x = np.random.default_rng(0).integers(0, 256, size=(12, 16, 16, 3))
        feats = est.fit(x).transform(x)
        assert feats.shape == (12, 8)
        np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-12)
        assert est.get_params()["queue_size"] == 8
        assert len(est.loss_curve_) == 1

    def test_transform_before_fit(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            MoCoEncoder().transform(np.zeros((1, 32, 32, 3)))
