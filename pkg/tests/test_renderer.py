"""Inversion stack: decoding, correction chains, and robust training."""

import math

import pytest
import torch

from latentplan import vocab
from latentplan.renderer import (
    BOS_ID,
    EOS_ID,
    MODE_BASE,
    MODE_CORRECTOR,
    PAD_ID,
    RENDER_VOCAB,
    BaseTrainConfig,
    Renderer,
    RendererConfig,
    RobustTrainConfig,
    batch_invert_with_history,
    correct,
    exact_match_curve,
    greedy_decode,
    hypothesize,
    invert,
    invert_with_history,
    pad_token_batch,
    render_plan,
    teacher_forcing_loss,
    train_base,
    train_corrector_robust,
)
from latentplan.plans import VariablePlan
from latentplan.seeding import numpy_rng, torch_generator
from latentplan.tasks import ToyEmbedder, gen_render_corpus, make_phi

CFG = RendererConfig(d=16, d_model=32, n_layers=1, n_heads=2, d_ff=64, max_text_len=8)


def tiny_renderer(seed: int = 0) -> Renderer:
    model = Renderer(CFG)
    model.reset_parameters(torch_generator(seed, "render-init"))
    return model


@pytest.fixture(scope="module")
def phi_pair():
    enc = ToyEmbedder(d_e=16, seed=0)
    proj = torch.nn.Identity()
    proj.in_features = 16
    proj.out_features = 16
    phi = lambda tokens: enc.embed(tokens).mean(dim=0) if len(tokens) else torch.zeros(16)
    return enc, phi


class TestConfigs:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            RendererConfig(d_model=30, n_heads=4)

    def test_text_len_positive(self):
        with pytest.raises(ValueError):
            RendererConfig(max_text_len=0)

    def test_train_config_bounds(self):
        with pytest.raises(ValueError):
            BaseTrainConfig(epochs=0)
        with pytest.raises(ValueError):
            RobustTrainConfig(alpha=-0.1)
        with pytest.raises(ValueError):
            RobustTrainConfig(train_rounds=0)


class TestPadBatch:
    def test_pads_with_pad_id(self):
        out = pad_token_batch([(1, 2), (3,)], 4)
        assert out.tolist() == [[1, 2, PAD_ID, PAD_ID], [3, PAD_ID, PAD_ID, PAD_ID]]

    def test_overflow_rejected(self):
        with pytest.raises(ValueError):
            pad_token_batch([(1, 2, 3)], 2)


class TestGreedyDecode:
    def test_never_emits_pad_or_bos(self):
        model = tiny_renderer()
        e = torch.randn(3, CFG.d, generator=torch.Generator().manual_seed(0))
        out = greedy_decode(model, e, [()] * 3, torch.zeros(3, CFG.d), MODE_BASE)
        for tokens, _ in out:
            assert PAD_ID not in tokens and BOS_ID not in tokens

    def test_untrained_rows_flag_truncation_without_eos(self):
        model = tiny_renderer()
        e = torch.randn(2, CFG.d, generator=torch.Generator().manual_seed(1))
        for tokens, truncated in greedy_decode(model, e, [()] * 2, torch.zeros(2, CFG.d), MODE_BASE):
            if truncated:
                assert len(tokens) == CFG.max_text_len
            else:
                assert len(tokens) < CFG.max_text_len

    def test_deterministic(self):
        e = torch.randn(2, CFG.d, generator=torch.Generator().manual_seed(2))
        a = greedy_decode(tiny_renderer(), e, [()] * 2, torch.zeros(2, CFG.d), MODE_BASE)
        b = greedy_decode(tiny_renderer(), e, [()] * 2, torch.zeros(2, CFG.d), MODE_BASE)
        assert a == b

    def test_mode_changes_output_distribution(self):
        model = tiny_renderer()
        e = torch.randn(4, CFG.d, generator=torch.Generator().manual_seed(3))
        base = model.encode_source(e, pad_token_batch([()] * 4, 8), torch.zeros(4, CFG.d), MODE_BASE)
        corr = model.encode_source(e, pad_token_batch([()] * 4, 8), torch.zeros(4, CFG.d), MODE_CORRECTOR)
        assert not torch.allclose(base[0], corr[0])


class TestTeacherForcing:
    def test_matches_manual_cross_entropy(self):
        model = tiny_renderer()
        e = torch.randn(2, CFG.d, generator=torch.Generator().manual_seed(0))
        targets = [(1, 2, 3), (4,)]
        loss = teacher_forcing_loss(model, e, [()] * 2, torch.zeros(2, CFG.d), MODE_BASE, targets)

        total, count = 0.0, 0
        for i, t in enumerate(targets):
            ys = torch.tensor([[BOS_ID, *t]])
            with torch.no_grad():
                logits = model(e[i : i + 1], pad_token_batch([()], 8), torch.zeros(1, CFG.d), MODE_BASE, ys)
            logp = torch.log_softmax(logits[0], dim=-1)
            out = list(t) + [EOS_ID]
            for pos, tok in enumerate(out):
                total += -float(logp[pos, tok])
                count += 1
        assert float(loss) == pytest.approx(total / count, rel=1e-5)

    def test_length_budget_enforced(self):
        model = tiny_renderer()
        e = torch.randn(1, CFG.d)
        with pytest.raises(ValueError):
            teacher_forcing_loss(model, e, [()], torch.zeros(1, CFG.d), MODE_BASE, [tuple(range(9))])


class TestInversionChain:
    def test_history_scores_never_decrease(self, phi_pair):
        _, phi = phi_pair
        model = tiny_renderer()
        e = phi(vocab.encode("abcd"))
        history = invert_with_history(model, e, phi, iters=6)
        assert len(history) == 6
        scores = [h.score for h in history]
        assert scores == sorted(scores)

    def test_invert_matches_history_tail(self, phi_pair):
        _, phi = phi_pair
        model = tiny_renderer()
        e = phi(vocab.encode("abcd"))
        assert invert(model, e, phi, iters=6).tokens == invert_with_history(model, e, phi, iters=6)[-1].tokens

    def test_batch_matches_scalar_chain(self, phi_pair):
        _, phi = phi_pair
        model = tiny_renderer()
        targets = torch.stack([phi(vocab.encode(s)) for s in ("abcd", "wxyz", "m")])
        batched = batch_invert_with_history(model, targets, phi, iters=4)
        for i in range(3):
            solo = invert_with_history(model, targets[i], phi, iters=4)
            assert [h.tokens for h in batched[i]] == [h.tokens for h in solo]
            assert [h.score for h in batched[i]] == pytest.approx([h.score for h in solo])

    def test_early_exit_on_exact_match(self, phi_pair, monkeypatch):
        _, phi = phi_pair
        model = tiny_renderer()
        e = phi(vocab.encode("abcd"))
        base = hypothesize(model, e, phi)
        perfect = type(base)(tokens=base.tokens, embedding=e, score=1.0, iteration=0)

        calls = []
        monkeypatch.setattr("latentplan.renderer.hypothesize", lambda *a: perfect)
        monkeypatch.setattr(
            "latentplan.renderer.correct", lambda *a: calls.append(1) or perfect
        )
        invert(model, e, phi, iters=10)
        assert calls == []

    def test_iteration_budget_validated(self, phi_pair):
        _, phi = phi_pair
        with pytest.raises(ValueError):
            invert(tiny_renderer(), torch.zeros(CFG.d), phi, iters=0)
        with pytest.raises(ValueError):
            invert_with_history(tiny_renderer(), torch.zeros(CFG.d), phi, iters=0)

    def test_correct_increments_iteration(self, phi_pair):
        _, phi = phi_pair
        model = tiny_renderer()
        e = phi(vocab.encode("ab"))
        base = hypothesize(model, e, phi)
        assert base.iteration == 0
        assert correct(model, e, base, phi).iteration == 1


class TestTraining:
    def corpus(self, phi, texts):
        return [(tuple(vocab.encode(t)), phi(vocab.encode(t))) for t in texts]

    def test_base_training_reduces_loss(self, phi_pair):
        _, phi = phi_pair
        model = tiny_renderer()
        pairs = self.corpus(phi, ["ab", "cd", "ef", "gh"])
        report = train_base(model, pairs, BaseTrainConfig(epochs=20, batch_size=4), root_seed=0)
        assert report.rows[-1]["loss"] < report.rows[0]["loss"]
        assert report.final_loss == report.rows[-1]["loss"]

    def test_base_training_deterministic(self, phi_pair):
        _, phi = phi_pair
        pairs = self.corpus(phi, ["ab", "cd"])

        def run():
            model = tiny_renderer()
            train_base(model, pairs, BaseTrainConfig(epochs=3, batch_size=2), root_seed=5)
            return torch.cat([p.flatten() for p in model.parameters()])

        assert torch.equal(run(), run())

    def test_empty_corpus_rejected(self, phi_pair):
        _, phi = phi_pair
        with pytest.raises(ValueError):
            train_base(tiny_renderer(), [], BaseTrainConfig(), root_seed=0)
        with pytest.raises(ValueError):
            train_corrector_robust(tiny_renderer(), [], RobustTrainConfig(), phi, root_seed=0)

    def test_zero_alpha_is_clean_training(self, phi_pair):
        # alpha=0 must skip noise generation entirely, not add zero noise,
        # so the rng stream and the resulting weights match a clean run
        _, phi = phi_pair
        pairs = self.corpus(phi, ["ab", "cd"])

        def run():
            model = tiny_renderer()
            train_corrector_robust(
                model, pairs, RobustTrainConfig(alpha=0.0, epochs=2, batch_size=2), phi, root_seed=3
            )
            return torch.cat([p.flatten() for p in model.parameters()])

        assert torch.equal(run(), run())

    def test_noise_changes_training(self, phi_pair):
        _, phi = phi_pair
        pairs = self.corpus(phi, ["ab", "cd"])

        def run(alpha):
            model = tiny_renderer()
            train_corrector_robust(
                model, pairs, RobustTrainConfig(alpha=alpha, epochs=2, batch_size=2), phi, root_seed=3
            )
            return torch.cat([p.flatten() for p in model.parameters()])

        assert not torch.equal(run(0.0), run(0.05))

    def test_draft_rounds_cycle(self, phi_pair):
        _, phi = phi_pair
        pairs = self.corpus(phi, ["ab"])
        model = tiny_renderer()
        report = train_corrector_robust(
            model, pairs, RobustTrainConfig(epochs=4, train_rounds=2, batch_size=1), phi, root_seed=0
        )
        assert [r["rounds"] for r in report.rows] == [1, 2, 1, 2]


class TestEvaluation:
    def test_curve_is_monotone_in_budget(self, phi_pair):
        _, phi = phi_pair
        model = tiny_renderer()
        pairs = [(tuple(vocab.encode(t)), phi(vocab.encode(t))) for t in ("ab", "cd", "ef")]
        curve = exact_match_curve(model, pairs, phi, budgets=[1, 3, 5], eval_noise=0.0, root_seed=0)
        assert curve[1] <= curve[3] <= curve[5]

    def test_render_plan_covers_active_slots(self, phi_pair):
        _, phi = phi_pair
        model = tiny_renderer()
        V = torch.zeros(4, CFG.d)
        V[0] = phi(vocab.encode("ab"))
        V[1] = phi(vocab.encode("cd"))
        s = torch.tensor([1.0, 1.0, 0.0, 0.0])
        plan = VariablePlan(V=V, s=s, n=2)
        texts = render_plan(model, plan, phi, iters=2)
        assert len(texts) == 2
