import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mifnet.bundle import ModelBundle
from mifnet.codec import ProxyCodecConfig, proxy_encode
from mifnet.datasets import if_samples, mif_samples
from mifnet.exceptions import ConfigurationError, NumericError, ValidationError
from mifnet.filters import IfNet, MifNet
from mifnet.frames import PatchSample, rasterize_partition
from mifnet.synthetic import natural_image, panning_clip, shifted_pairs
from mifnet.training import (
    LossWeights,
    Phase,
    TrainConfig,
    _adam,
    _Phase1Monitor,
    endpoint_error,
    finetune_chain,
    loss_global,
    loss_intermediate,
    loss_total,
    train_if,
    train_mc,
    train_mif,
)


class TestLosses:
    def test_examples(self):
        u = np.zeros((2, 2))
        assert loss_intermediate([u, u], u) == 0
        assert loss_intermediate([u, u + 1], u) == 2.0
        assert loss_global(u, u) == 0
        assert loss_global(u + 0.5, u) == 1.0

    def test_loop_oracles(self):
        rng = np.random.default_rng(0)
        c1, c2, u, e, r = rng.random((5, 5, 7))
        want_int = 0.0
        for c in (c1, c2):
            for i in range(5):
                for j in range(7):
                    want_int += (c[i, j] - u[i, j]) ** 2
        want_glo = sum((e[i, j] - r[i, j]) ** 2 for i in range(5) for j in range(7))
        assert abs(loss_intermediate([c1, c2], u) - want_int / 2) <= 1e-9
        assert abs(loss_global(e, r) - want_glo) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            loss_intermediate([np.zeros((2, 2))], np.zeros((2, 3)))
        with pytest.raises(ValidationError):
            loss_global(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_weighted_total(self):
        assert loss_total(1.0, 2.0, LossWeights(Phase.MC_FIRST)) == pytest.approx(1.01, abs=1e-12)
        assert loss_total(1.0, 2.0, LossWeights(Phase.GLOBAL)) == pytest.approx(1.99, abs=1e-12)
        assert loss_total(0.0, 0.0, LossWeights()) == 0.0
        assert (LossWeights(Phase.MC_FIRST).alpha, LossWeights(Phase.MC_FIRST).beta) == (0.99, 0.01)
        assert (LossWeights(Phase.GLOBAL).alpha, LossWeights(Phase.GLOBAL).beta) == (0.01, 0.99)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0, 0.5))
    def test_nonnegative_and_zero_iff_equal(self, seed, amp):
        a = np.random.default_rng(seed).random((4, 4))
        b = a + amp
        assert loss_global(a, b) >= 0 and loss_intermediate([b], a) >= 0
        assert (loss_global(a, b) == 0) == np.array_equal(a, b)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100), st.sampled_from(list(Phase)))
    def test_total_is_linear(self, a, b, c, phase):
        w = LossWeights(phase)
        assert loss_total(a + c, b, w) == pytest.approx(loss_total(a, b, w) + w.alpha * c, rel=1e-12, abs=1e-12)
        assert loss_total(a, b + c, w) == pytest.approx(loss_total(a, b, w) + w.beta * c, rel=1e-12, abs=1e-12)


def test_adam_step_matches_textbook_formula():
    cfg = TrainConfig(learning_rate=1e-2)
    p = torch.nn.Parameter(torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64))
    module = torch.nn.Module()
    module.p = p
    opt = _adam(module, cfg)
    grads = [np.array([0.1, -0.3, 2.0]), np.array([-0.2, 0.05, 1.0])]
    m = np.zeros(3)
    v = np.zeros(3)
    theta = np.array([0.5, -1.0, 2.0])
    for t, g in enumerate(grads, start=1):
        p.grad = torch.tensor(g)
        opt.step()
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        np.testing.assert_allclose(p.detach().numpy(), theta, atol=1e-9, rtol=0)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.learning_rate, c.patch) == (16, 1e-4, 64)
        assert (c.beta1, c.beta2, c.eps) == (0.9, 0.999, 1e-8)

    def test_from_text(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("# desk run\nbatch_size = 4\nlearning_rate=1e-3  # faster\niterations = 2e4\n"
                        "init_from = none\nqp=32\n")
        c = TrainConfig.from_file(path, seed=3)
        assert (c.batch_size, c.learning_rate, c.iterations, c.init_from, c.qp, c.seed) == (4, 1e-3, 20000,
                                                                                          None, 32, 3)

    @pytest.mark.parametrize("text", ["bogus = 1", "batch_size 4", "batch_size = four", "batch_size = 0"])
    def test_bad_text(self, text):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_text(text)


@pytest.fixture(scope="module")
def data():
    raws = panning_clip(natural_image("chelsea"), 6, 64, 64, seed=2)
    coded = proxy_encode(raws, ProxyCodecConfig(qp_base=37))
    maps = [rasterize_partition(lay, 64, 64) for lay in coded.layouts]
    ifs = if_samples(raws, coded.urfs, maps, stride=32, size=32)
    mifs = mif_samples(raws, coded.urfs, maps, stride=32, size=32)
    return ifs, mifs


def _small(**kw):
    base = dict(batch_size=2, patch=32, iterations=4, finetune_iterations=2, growth=4, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainIf:
    def test_initial_loss_is_urf_error(self, data):
        ifs, _ = data
        ds = ifs[:8]
        _, log = train_if(ds, _small(batch_size=8, iterations=1))
        want = sum(float(np.sum((s.urf_patch.astype(np.float32) - s.raw_patch.astype(np.float32)) ** 2))
                   for s in ds)
        assert log.l_glo[0] == pytest.approx(want, rel=1e-5)

    def test_learning_rate_zero_keeps_parameters(self, data):
        ifs, _ = data
        torch.manual_seed(0)
        net = IfNet(growth=4)
        before = {k: v.clone() for k, v in net.state_dict().items()}
        train_if(ifs[:4], _small(learning_rate=0.0), net=net)
        for k, v in net.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_seeded_runs_reproduce(self, data):
        ifs, _ = data
        _, a = train_if(ifs[:6], _small(iterations=6, learning_rate=1e-3))
        _, b = train_if(ifs[:6], _small(iterations=6, learning_rate=1e-3))
        assert abs(a.l_glo[-1] - b.l_glo[-1]) <= 1e-6

    def test_init_from_copies_donor(self, data, tmp_path):
        ifs, _ = data
        torch.manual_seed(5)
        donor = ModelBundle.from_module(IfNet(growth=4), "if")
        path = donor.save(tmp_path / "donor.bundle")
        bundle, _ = train_if(ifs[:2], _small(iterations=0, init_from=str(path)))
        assert bundle.same_parameters(donor)

    def test_init_from_wrong_kind(self, data, tmp_path):
        ifs, _ = data
        path = ModelBundle.from_module(MifNet(growth=4), "mif").save(tmp_path / "m.bundle")
        with pytest.raises(ValidationError):
            train_if(ifs[:2], _small(init_from=str(path)))

    def test_dataset_errors(self, data):
        ifs, mifs = data
        with pytest.raises(ValidationError):
            train_if([], _small())
        with pytest.raises(ValidationError):
            train_if(mifs[:2], _small())
        with pytest.raises(ConfigurationError):
            train_if(ifs[:1], _small(batch_size=2))

    def test_non_finite_loss_aborts(self, data):
        ifs, _ = data
        net = IfNet(growth=4)
        with torch.no_grad():
            net.units[-1].convs[-1].bias.fill_(float("nan"))
        with pytest.raises(NumericError, match="iteration 0"):
            train_if(ifs[:2], _small(), net=net)


class TestTrainMif:
    def test_log_and_bundle(self, data):
        _, mifs = data
        assert mifs and all(s.num_refs == 2 for s in mifs)
        bundle, log = train_mif(mifs[:4], _small(max_phase1_fraction=0.5), net=MifNet(growth=4, mc_width=8))
        assert bundle.kind == "mif"
        assert log.phase2_start == 2
        assert log.phase[:2] == ["mc_first", "mc_first"] and log.phase[2:] == ["global", "global"]
        assert len(log.l_int) == 4 and all(v >= 0 for v in log.l_int)

    def test_missing_refs(self, data):
        ifs, _ = data
        with pytest.raises(ValidationError):
            train_mif(ifs[:2], _small())

    def test_intermediate_loss_decreases_on_shift_data(self):
        rng = np.random.default_rng(0)
        img = natural_image("astronaut")[..., 1]
        samples = []
        for _ in range(16):
            y, x = rng.integers(8, 400, 2)
            dx, dy = rng.integers(-2, 3, 2)
            urf = img[y:y + 32, x:x + 32]
            m = np.ones((32, 32))
            refs = (img[y - dy:y - dy + 32, x - dx:x - dx + 32], img[y + dy:y + dy + 32, x + dx:x + dx + 32])
            samples.append(PatchSample(urf, urf, m, m, refs, (int(y), int(x))))
        cfg = _small(iterations=300, learning_rate=1e-3, batch_size=4, convergence_window=10_000,
                     max_phase1_fraction=1.0)
        torch.manual_seed(0)
        _, log = train_mif(samples, cfg, net=MifNet(growth=4, mc_width=12))
        smoothed = [np.mean(log.l_int[k:k + 100]) for k in range(0, 300, 100)]
        assert smoothed[0] > smoothed[1] > smoothed[2]


def test_phase_monitor():
    mon = _Phase1Monitor(window=2, tol=0.1, limit=100)
    assert not any(mon.update(i, v) for i, v in enumerate([10, 10, 5, 5]))
    assert mon.update(4, 4.9) is False
    assert mon.update(5, 4.9) is True
    assert _Phase1Monitor(window=50, tol=0.0, limit=3).update(2, 1.0)


class TestFinetuneChain:
    def test_single_qp_is_scratch(self, data):
        ifs, _ = data
        out = finetune_chain([37], _small(), {37: ifs[:2]})
        assert out[37].manifest["budget"] == "scratch" and out[37].manifest["init_from"] is None

    def test_chain_provenance(self, data, tmp_path):
        ifs, _ = data
        qps = [37, 32, 27, 22]
        out = finetune_chain(qps, _small(), {q: ifs[:2] for q in qps}, out_dir=tmp_path)
        assert sorted(out) == sorted(qps)
        assert out[32].manifest["init_from"] == "if-qp37"
        for hi, lo in zip(qps, qps[1:]):
            assert ModelBundle.load(tmp_path / f"if-qp{lo}.bundle").manifest["init_from"] == f"if-qp{hi}"
            assert out[lo].manifest["iterations"] == 2
        assert out[37].manifest["iterations"] == 4

    def test_errors(self, data):
        ifs, _ = data
        with pytest.raises(ValidationError):
            finetune_chain([32, 37], _small(), {32: ifs, 37: ifs})
        with pytest.raises(ValidationError):
            finetune_chain([37], _small(init_from="/nonexistent.bundle"), {37: ifs})
        with pytest.raises(ValidationError):
            finetune_chain([37, 32], _small(), {37: ifs[:2]})


@pytest.fixture(scope="module")
def pairs():
    return shifted_pairs([natural_image("astronaut")], 12, size=32, rng=np.random.default_rng(0))


class TestTrainMc:
    def test_runs_and_builds(self, pairs):
        refs, tgts, shifts = pairs
        cfg = TrainConfig(batch_size=4, learning_rate=1e-3, iterations=3)
        bundle, log = train_mc(refs, tgts, cfg, shifts=shifts, supervision=1.0)
        assert bundle.kind == "mc" and bundle.manifest["supervision"] == 1.0
        assert len(log.l_int) == 3 and all(v > 0 for v in log.l_glo)
        net = bundle.build()
        assert endpoint_error(net, refs, tgts, shifts) >= 0

    def test_unsupervised_logs_zero_endpoint_term(self, pairs):
        refs, tgts, _ = pairs
        _, log = train_mc(refs, tgts, TrainConfig(batch_size=2, iterations=2))
        assert log.l_glo == [0.0, 0.0]

    def test_endpoint_error_of_exact_flow(self, pairs):
        refs, tgts, shifts = pairs

        class Exact(torch.nn.Module):
            """Returns the true shifts; pairs arrive in dataset order."""

            def forward(self, r, t):
                flow = torch.tensor(shifts)[:, :, None, None].expand(-1, -1, *r.shape[2:])
                return flow, r

        assert endpoint_error(Exact(), refs, tgts, shifts) == 0.0
        assert endpoint_error(Exact(), refs, tgts, shifts + [3.0, 4.0], margin=2) == pytest.approx(5.0)

    def test_errors(self, pairs):
        refs, tgts, shifts = pairs
        with pytest.raises(ValidationError):
            train_mc(refs, tgts[:5], TrainConfig(batch_size=2, iterations=1))
        with pytest.raises(ValidationError):
            train_mc(refs, tgts, TrainConfig(batch_size=2, iterations=1), supervision=1.0)
        with pytest.raises(ValidationError):
            train_mc(refs, tgts, TrainConfig(batch_size=2, iterations=1), shifts=shifts[:3], supervision=1.0)
        with pytest.raises(ConfigurationError):
            train_mc(refs, tgts, TrainConfig(batch_size=50, iterations=1))
