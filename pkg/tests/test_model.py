import numpy as np
import pytest
import torch

from destpred.data.synthetic import SynthConfig, gen_synthetic_dataset
from destpred.mixture import nll_loss
from destpred.models.gradcheck import (
    audit_mixture_core,
    audit_pyramid_model,
    check_mixture_grad,
    random_mixture,
    random_targets,
)
from destpred.models.pyramid import (
    ModelError,
    PdpcOutput,
    PyramidConfig,
    PyramidMixtureNet,
    cell_anchors,
    output_to_meters,
    pdpc_loss,
    predict_mixtures,
)
from destpred.models.training import (
    ArrayBatcher,
    PlateauScale,
    TrainConfig,
    TrainingError,
    train_model,
)
from destpred.pipeline import split_training_arrays, _to_torch

torch.set_num_threads(1)


class TestConfigArithmetic:
    def test_default_component_count(self):
        cfg = PyramidConfig.full()
        assert cfg.grid_shapes() == [(48, 72), (24, 36), (12, 18), (6, 9)]
        assert cfg.n_components() == 4590
        assert 4590 == 48 * 72 + 24 * 36 + 12 * 18 + 6 * 9

    def test_first_anchor_stride_4(self):
        anchors = cell_anchors(4, (48, 72))
        np.testing.assert_array_equal(anchors[0], [2.0, 2.0])

    def test_anchor_formula_random_cells(self):
        rng = np.random.default_rng(0)
        for k in (2, 4, 8, 16, 32):
            gh, gw = 12, 18
            anchors = cell_anchors(k, (gh, gw)).reshape(gh, gw, 2)
            for _ in range(10):
                w = int(rng.integers(0, gw))
                h = int(rng.integers(0, gh))
                np.testing.assert_array_equal(
                    anchors[h, w], [w * k + k // 2, h * k + k // 2]
                )

    def test_desk_and_audit_presets_valid(self):
        desk = PyramidConfig.desk()
        assert desk.input_hw == (96, 144)
        audit = PyramidConfig.audit()
        assert audit.n_components() == sum(
            (24 // s) * (36 // s) for s in audit.strides
        )

    def test_rejects_bad_aspect(self):
        with pytest.raises(Exception):
            PyramidConfig(input_hw=(100, 100))

    def test_rejects_indivisible_stride(self):
        with pytest.raises(ValueError):
            PyramidConfig(input_hw=(96, 144), strides=(5,))

    def test_rejects_bad_attend_after(self):
        with pytest.raises(ValueError):
            PyramidConfig(attend_after=9)

    def test_json_round_trip(self):
        cfg = PyramidConfig.desk()
        assert PyramidConfig.from_json(cfg.to_json()) == cfg


@pytest.fixture(scope="module")
def audit_model():
    torch.manual_seed(0)
    return PyramidMixtureNet(PyramidConfig.audit())


@pytest.fixture(scope="module")
def audit_inputs():
    torch.manual_seed(1)
    cfg = PyramidConfig.audit()
    layout = torch.rand(2, cfg.in_channels, *cfg.input_hw)
    command = torch.randn(2, cfg.command_dim)
    return layout, command


class TestForward:
    def test_output_shapes(self, audit_model, audit_inputs):
        out = audit_model(*audit_inputs)
        k = audit_model.cfg.n_components()
        assert out.means_px.shape == (2, k, 2)
        assert out.sigmas_px.shape == (2, k, 2)
        assert out.logits.shape == (2, k)

    def test_sigmas_positive_and_finite(self, audit_model, audit_inputs):
        out = audit_model(*audit_inputs)
        assert torch.all(out.sigmas_px > 0)
        for t in (out.means_px, out.sigmas_px, out.logits):
            assert torch.all(torch.isfinite(t))

    def test_command_changes_prediction(self, audit_model, audit_inputs):
        layout, command = audit_inputs
        out_a = audit_model(layout, command)
        out_b = audit_model(layout, torch.randn_like(command) + 1.0)
        assert not torch.allclose(out_a.logits, out_b.logits)

    def test_meters_conversion_matches_frame(self, audit_model):
        cfg = audit_model.cfg
        from destpred.geometry import PixelFrame, pixel_to_ego

        means_px = torch.tensor([[[0.0, 0.0], [18.0, 12.0], [36.0, 24.0]]])
        sigmas_px = torch.ones(1, 3, 2) * 0.6
        out = PdpcOutput(
            means_px=means_px, sigmas_px=sigmas_px, logits=torch.zeros(1, 3), config=cfg
        )
        means_m, sigmas_m = output_to_meters(out)
        frame = PixelFrame.from_hw(cfg.input_hw)
        want = pixel_to_ego(means_px[0].numpy(), frame)
        np.testing.assert_allclose(means_m[0].numpy(), want, atol=1e-6)
        np.testing.assert_allclose(sigmas_m.numpy(), 0.6 / frame.scale, atol=1e-7)

    def test_torch_loss_equals_numpy_mixture_nll(self, audit_model):
        # the training loss and the inference-time Mixture2D must describe
        # the same density
        cfg = audit_model.cfg
        torch.manual_seed(3)
        layout = torch.rand(1, cfg.in_channels, *cfg.input_hw)
        command = torch.randn(1, cfg.command_dim)
        targets = torch.tensor([[[12.0, 3.0], [8.0, -2.0]]])
        mask = torch.ones(1, 2)
        audit_model.eval()
        with torch.no_grad():
            out = audit_model(layout, command)
            loss_torch = float(pdpc_loss(out, targets, mask))
        mixtures = predict_mixtures(audit_model, layout, command)
        loss_np = nll_loss(mixtures[0], targets[0].numpy())
        assert loss_torch == pytest.approx(loss_np, rel=1e-5)

    def test_predict_restores_training_state(self, audit_model, audit_inputs):
        audit_model.train()
        predict_mixtures(audit_model, *audit_inputs)
        assert audit_model.training
        audit_model.eval()
        predict_mixtures(audit_model, *audit_inputs)
        assert not audit_model.training


class TestScaleGainGuard:
    def test_eval_raises_on_nonpositive_gain(self):
        model = PyramidMixtureNet(PyramidConfig.audit())
        with torch.no_grad():
            model.scale_gain[0] = -0.1
        model.eval()
        layout = torch.rand(1, 15, 24, 36)
        command = torch.randn(1, 768)
        with pytest.raises(ModelError):
            model(layout, command)

    def test_train_warns_on_nonpositive_gain(self):
        model = PyramidMixtureNet(PyramidConfig.audit())
        with torch.no_grad():
            model.scale_gain[0] = -0.1
        model.train()
        layout = torch.rand(1, 15, 24, 36)
        command = torch.randn(1, 768)
        with pytest.warns(UserWarning, match="sigma gain"):
            model(layout, command)


class TestOverfitOneRecord:
    def test_nll_drops_below_initial(self):
        splits, _ = gen_synthetic_dataset(SynthConfig(n_train=1, n_val=1, n_test=1), seed=0)
        cfg = PyramidConfig.audit()
        arrays = split_training_arrays(splits["train"], cfg.input_hw)
        batch = _to_torch(arrays)
        torch.manual_seed(0)
        model = PyramidMixtureNet(cfg)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        losses = []
        for _ in range(200):
            opt.zero_grad()
            out = model(batch["layout"], batch["command"])
            loss = pdpc_loss(out, batch["targets"], batch["mask"])
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        assert losses[-1] < losses[0]
        assert min(losses[-20:]) < losses[0] - 1.0


class TestGradientAudits:
    def test_mixture_grad_single_instances(self):
        rng = np.random.default_rng(0)
        for kind in ("diag", "chol"):
            m = random_mixture(rng, 4, kind)
            targets = random_targets(rng, m, 2)
            err = check_mixture_grad(m, targets)
            assert err < 1e-4

    def test_mixture_audit_small(self):
        result = audit_mixture_core(n_instances=10, seed=1)
        assert result.passed, result.summary()

    def test_model_audit_single(self):
        result = audit_pyramid_model(n_instances=1, seed=1, n_coords=12)
        assert result.passed, result.summary()


class TestArrayBatcher:
    def test_epoch_covers_all_once(self):
        arrays = {"x": np.arange(10)}
        batcher = ArrayBatcher(arrays, batch_size=3, seed=0, shuffle=True)
        seen = np.concatenate([b["x"] for b in batcher.batches(0)])
        assert sorted(seen.tolist()) == list(range(10))

    def test_same_seed_same_order(self):
        arrays = {"x": np.arange(32)}
        a = ArrayBatcher(arrays, 8, seed=5, shuffle=True)
        b = ArrayBatcher(arrays, 8, seed=5, shuffle=True)
        for ba, bb in zip(a.batches(2), b.batches(2)):
            np.testing.assert_array_equal(ba["x"], bb["x"])

    def test_epochs_differ(self):
        arrays = {"x": np.arange(64)}
        batcher = ArrayBatcher(arrays, 64, seed=0, shuffle=True)
        e0 = next(iter(batcher.batches(0)))["x"]
        e1 = next(iter(batcher.batches(1)))["x"]
        assert not np.array_equal(e0, e1)

    def test_no_shuffle_keeps_order(self):
        arrays = {"x": np.arange(7)}
        batcher = ArrayBatcher(arrays, 3, seed=0, shuffle=False)
        batches = [b["x"].tolist() for b in batcher.batches(0)]
        assert batches == [[0, 1, 2], [3, 4, 5], [6]]


class TestPlateauScale:
    def test_scripted_trace(self):
        lin = torch.nn.Linear(2, 2)
        opt = torch.optim.Adam(lin.parameters(), lr=1.0)
        sched = PlateauScale(opt, patience=3, factor=0.1, mode="max")
        # value, expected fire
        trace = [
            (0.50, False),  # first observation sets the best
            (0.60, False),  # improvement
            (0.60, False),  # wait 1
            (0.60, False),  # wait 2
            (0.60, True),  # wait 3 -> fire, reset
            (0.60, False),  # wait 1 again
            (0.70, False),  # improvement resets wait
            (0.65, False),  # wait 1
            (0.65, False),  # wait 2
            (0.65, True),  # wait 3 -> fire
        ]
        lrs = []
        for value, want_fire in trace:
            fired = sched.step(value)
            assert fired == want_fire, (value, want_fire)
            lrs.append(opt.param_groups[0]["lr"])
        assert lrs[-1] == pytest.approx(1.0 * 0.1 * 0.1)


class TestTrainModel:
    def make_quadratic_problem(self):
        torch.manual_seed(0)
        model = torch.nn.Linear(4, 1)
        x = np.random.default_rng(0).standard_normal((64, 4)).astype(np.float32)
        y = (x @ np.array([1.0, -2.0, 0.5, 0.0], dtype=np.float32))[:, None]

        def loss_fn(m, batch):
            xb = torch.from_numpy(batch["x"])
            yb = torch.from_numpy(batch["y"])
            return ((m(xb) - yb) ** 2).mean()

        return model, loss_fn, {"x": x, "y": y}

    def test_loss_decreases_and_best_state_saved(self):
        model, loss_fn, arrays = self.make_quadratic_problem()
        cfg = TrainConfig(epochs=20, batch_size=16, lr=0.05, seed=0)
        result = train_model(model, loss_fn, arrays, cfg, val_arrays=arrays)
        assert result.curve[-1][1] < result.curve[0][1]
        assert result.best_val == min(c[2] for c in result.curve)
        assert set(result.best_state) == {k for k, _ in model.state_dict().items()}

    def test_early_stop(self):
        model, loss_fn, arrays = self.make_quadratic_problem()

        def stuck_loss(m, batch):
            return loss_fn(m, batch) * 0.0 + 1.0

        cfg = TrainConfig(epochs=50, batch_size=16, lr=0.05, seed=0, early_stop_patience=3)
        result = train_model(model, stuck_loss, arrays, cfg, val_arrays=arrays)
        assert result.final_epoch <= 4

    def test_non_finite_loss_raises(self):
        model, _, arrays = self.make_quadratic_problem()

        def nan_loss(m, batch):
            return torch.tensor(float("nan"), requires_grad=True) + sum(
                p.sum() * 0 for p in m.parameters()
            )

        with pytest.raises(TrainingError, match="non-finite"):
            train_model(model, nan_loss, arrays, TrainConfig(epochs=2, batch_size=16, seed=0))

    def test_divergence_raises(self):
        model, _, arrays = self.make_quadratic_problem()
        counter = {"epoch_calls": 0}

        def exploding_loss(m, batch):
            counter["epoch_calls"] += 1
            scale = 10.0 ** counter["epoch_calls"]
            return torch.ones(()) * scale + sum(p.sum() * 0 for p in m.parameters())

        with pytest.raises(TrainingError, match="diverged"):
            train_model(
                model,
                exploding_loss,
                arrays,
                TrainConfig(epochs=10, batch_size=64, lr=1e-5, seed=0),
            )

    def test_curve_csv(self, tmp_path):
        model, loss_fn, arrays = self.make_quadratic_problem()
        cfg = TrainConfig(epochs=3, batch_size=32, lr=0.05, seed=0)
        result = train_model(model, loss_fn, arrays, cfg, val_arrays=arrays)
        p = tmp_path / "curve.csv"
        result.write_curve_csv(p)
        lines = p.read_text().strip().splitlines()
        assert len(lines) == 4
        assert lines[0].split(",")[0] == "epoch"
