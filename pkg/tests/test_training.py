import numpy as np
import pytest
import torch

from amaut.audio_io import SynthSpec, generate_noise_bank, generate_synth_corpus
from amaut.augment import AugmentationSpec, recipe_specs
from amaut.errors import ConfigError, DivergenceError
from amaut.frontend import MelParams
from amaut.losses import lsr_loss
from amaut.model import AMAuT, ModelConfig, featurize, to_tensor
from amaut.numerics import NesterovSGD, softmax
from amaut.training import (
    TrainConfig,
    _batches,
    accumulate_views,
    build_views,
    multiview_step,
    predict_proba,
    train,
)

MEL = MelParams(n_mels=16)
SPEC = SynthSpec(n_classes=3, clips_per_class=4, duration_s=0.5, sample_rate=8000)


def toy_model(seed=0):
    torch.manual_seed(seed)
    cfg = ModelConfig.for_input(MEL, 8000, 0.5, n_classes=3, embed_dim=16, n_heads=2, n_blocks=2,
                                cnn_width=16, cnn_mid=8, target_K=6)
    return AMAuT(cfg, MEL)


@pytest.fixture(scope="module")
def corpus():
    manifest, clips = generate_synth_corpus(SPEC)
    return clips, manifest.labels


def grads(model):
    return [None if p.grad is None else p.grad.clone() for p in model.parameters()]


class TestAdditivity:
    def test_accumulated_equals_sum_of_separate_views(self, corpus):
        clips, labels = corpus
        bank = generate_noise_bank(8000, 1.0)
        views = build_views(clips[:6], recipe_specs("train4", bank), seed=0, epoch=0, indices=range(6))
        model = toy_model().train()
        inputs = [to_tensor(featurize(v, MEL), model) for v in views]
        loss_fn = lambda p: lsr_loss(p, labels[:6])

        torch.manual_seed(11)
        rep = accumulate_views(model, inputs, loss_fn)
        together = grads(model)

        torch.manual_seed(11)
        per_view_losses, per_view_grads = [], []
        for x in inputs:
            model.zero_grad(set_to_none=True)
            loss = loss_fn(softmax(model(x)))
            loss.backward()
            per_view_losses.append(loss.item())
            per_view_grads.append(grads(model))

        total = 0.0
        for v in per_view_losses:
            total += v
        assert rep.total == total and rep.per_view == per_view_losses
        for i, g in enumerate(together):
            s = per_view_grads[0][i]
            for vg in per_view_grads[1:]:
                s = s + vg[i]
            assert torch.equal(g, s)

    def test_identity_views_scale_single_loss(self, corpus):
        clips, labels = corpus
        model = toy_model().eval()  # deterministic forward
        x = to_tensor(featurize(clips[:4], MEL), model)
        single = lsr_loss(softmax(model(x)), labels[:4]).item()
        model.zero_grad()
        rep = accumulate_views(model, [x] * 4, lambda p: lsr_loss(p, labels[:4]))
        assert rep.per_view == [single] * 4
        assert rep.total == ((single + single) + single) + single
        assert rep.total == pytest.approx(4 * single, rel=1e-15)

    def test_single_view_is_plain_training(self, corpus):
        clips, labels = corpus
        a, b = toy_model(1), toy_model(1)
        oa = NesterovSGD(a.parameters(), lr=0.01)
        ob = NesterovSGD(b.parameters(), lr=0.01)
        torch.manual_seed(5)
        multiview_step(a, clips[:4], labels[:4], oa, specs=[AugmentationSpec("identity")])
        torch.manual_seed(5)
        b.train()
        ob.zero_grad()
        lsr_loss(softmax(b(to_tensor(featurize(clips[:4], MEL), b))), labels[:4]).backward()
        ob.step()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_non_finite_view_skips_step(self, corpus):
        clips, labels = corpus
        model = toy_model()
        x = to_tensor(featurize(clips[:4], MEL), model)
        calls = []

        def loss_fn(p):
            calls.append(1)
            return p.sum() * (float("nan") if len(calls) == 2 else 1.0)

        rep = accumulate_views(model.train(), [x, x, x], loss_fn)
        assert rep.skipped and len(rep.per_view) == 2
        assert all(p.grad is None for p in model.parameters())


class TestBatching:
    @pytest.mark.parametrize("n,bs", [(10, 3), (9, 4), (7, 7), (5, 2), (33, 32)])
    def test_cover_once_without_singletons(self, n, bs):
        batches = _batches(n, bs, np.random.default_rng(0))
        flat = np.concatenate(batches)
        assert sorted(flat.tolist()) == list(range(n))
        assert all(len(b) >= 2 for b in batches)

    def test_batch_size_guard(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=1)


class TestTrain:
    def test_zero_epochs_keeps_init(self, corpus):
        clips, labels = corpus
        model = toy_model()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        res = train(model, clips, labels, TrainConfig(epochs=0, recipe="train1"))
        assert res.history == []
        for k, v in res.best_state.items():
            assert torch.equal(v, before[k])

    def test_deterministic(self, corpus):
        clips, labels = corpus
        bank = generate_noise_bank(8000, 1.0)
        cfg = TrainConfig(epochs=2, batch_size=4, lr0=0.01, seed=3)
        states = []
        for _ in range(2):
            m = toy_model()
            res = train(m, clips, labels, cfg, noise_bank=bank, val_clips=clips[:3],
                        val_labels=labels[:3])
            states.append((res.best_state, [r.train_loss for r in res.history]))
        assert states[0][1] == states[1][1]
        for k in states[0][0]:
            assert torch.equal(states[0][0][k], states[1][0][k])

    def test_best_state_tracks_validation(self, corpus):
        clips, labels = corpus
        seen = []
        res = train(toy_model(), clips, labels, TrainConfig(epochs=3, batch_size=4, recipe="train1"),
                    val_clips=clips, val_labels=labels, on_epoch=seen.append)
        accs = [r.val_accuracy for r in seen]
        assert res.best_accuracy == max(accs)
        assert res.best_epoch == accs.index(max(accs))

    def test_all_nan_raises_divergence(self, corpus):
        clips, labels = corpus
        model = toy_model()
        with torch.no_grad():
            model.head.fc3.weight.fill_(float("nan"))
        with pytest.raises(DivergenceError):
            train(model, clips, labels, TrainConfig(epochs=1, batch_size=4, recipe="train1"))

    def test_predict_proba_simplex(self, corpus):
        clips, _ = corpus
        p = predict_proba(toy_model(), clips, batch_size=5)
        assert p.shape == (12, 3)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
