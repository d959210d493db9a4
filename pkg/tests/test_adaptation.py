import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from incpl.adaptation import (
    AdaptationConfig,
    StreamConfig,
    adapt_concurrent,
    adapt_text,
    adapt_visual,
    init_adaptation_state,
    predict,
    run_stream,
)
from incpl.backbone import ToyBackend
from incpl.context_store import ContextPair, ContextSet
from incpl.data import load_manifest
from incpl.errors import ConfigurationError, NumericalFailureError
from incpl.harness import SyntheticTaskSpec, generate_synthetic
from incpl.prompts import build_vocabulary
from incpl.token_net import init_token_net

from conftest import GRAD_CHECK_CONFIG, random_image


@pytest.fixture(scope="module")
def micro_task(tmp_path_factory):
    """Tiny task on the 8-wide backend: 6 classes, 30 test samples."""
    out = tmp_path_factory.mktemp("micro_task")
    spec = SyntheticTaskSpec(n_classes=6, samples_per_class=6, seed=1)
    labeled, test = generate_synthetic(spec, out, backend_config=GRAD_CHECK_CONFIG)
    return {"dir": out, "labeled": labeled, "test": test}


@pytest.fixture(scope="module")
def micro_backend():
    return ToyBackend(GRAD_CHECK_CONFIG)


def make_world(backend, n_classes=3, n_ctx=2, variant="language-aware", **ad_kw):
    names = ["amber", "basil", "cobalt", "dune", "ember"][:n_classes]
    vocab = build_vocabulary(backend, names)
    cfg = StreamConfig(adaptation=AdaptationConfig(**ad_kw), variant=variant)
    state = init_adaptation_state(backend, vocab, cfg)
    rng = np.random.default_rng(0)
    x_t = random_image(rng, backend.config, "x_t")
    pairs = [
        ContextPair(sample=random_image(rng, backend.config, f"c{i}"), label=i % n_classes,
                    source_id=f"c{i}")
        for i in range(n_ctx)
    ]
    ctx = ContextSet(pairs=pairs, strategy="random", label_mode="gold")
    return vocab, cfg, state, x_t, ctx


def prompt_fingerprint(state):
    v = state.prompts.visual
    parts = [state.prompts.text.tokens.detach().clone()]
    parts.append(v.values.detach().clone() if v.is_pixel else v.delta.detach().clone())
    return parts


class TestAdaptVisual:
    def test_zero_lr_changes_nothing_but_counters(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend, lr=0.0)
        before = prompt_fingerprint(state)
        theta_before = state.theta.digest()
        adapt_visual(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)
        after = prompt_fingerprint(state)
        assert all(torch.equal(a, b) for a, b in zip(before, after))
        assert state.theta.digest() == theta_before
        assert state.counters.vision_calls == 3  # x_t + 2 context images

    def test_counter_example_five_context(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend, n_ctx=5)
        adapt_visual(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)
        assert state.counters.vision_calls == 6
        assert state.counters.text_calls == vocab.size  # one batch of C class sequences
        assert state.counters.text_batches == 1

    def test_updates_visual_offset_and_theta(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend)
        theta_before = state.theta.digest()
        adapt_visual(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)
        assert not torch.equal(state.prompts.visual.delta,
                               torch.zeros_like(state.prompts.visual.delta))
        assert state.theta.digest() != theta_before
        assert torch.equal(state.prompts.text.tokens, state.prompts.text_init)  # P_t frozen

    def test_text_only_mode_rejects_visual_phase(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend, mode="text-only")
        with pytest.raises(ConfigurationError):
            adapt_visual(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)

    def test_token_random_variant_leaves_theta_alone(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend, variant="token-random")
        theta_before = state.theta.digest()
        adapt_visual(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)
        assert state.theta.digest() == theta_before
        assert not torch.equal(state.prompts.visual.delta,
                               torch.zeros_like(state.prompts.visual.delta))

    def test_pixel_variant_moves_perturbation(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend, variant="padded")
        adapt_visual(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)
        values = state.prompts.visual.values.detach()
        mask = state.prompts.visual.region_mask
        assert float((values * mask).abs().max()) > 0
        assert float((values * (1 - mask)).abs().max()) == 0.0  # only the frame moves

    def test_shared_prompt_instrumentation(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend, n_ctx=4)
        adapt_visual(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)
        assert len(state.last_prompt_ids) == 1


class TestAdaptText:
    def test_visual_prompt_and_theta_frozen(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend, mode="text-only")
        theta_before = state.theta.digest()
        delta_before = state.prompts.visual.delta.detach().clone()
        adapt_text(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)
        assert state.theta.digest() == theta_before
        assert torch.equal(state.prompts.visual.delta, delta_before)
        assert not torch.equal(state.prompts.text.tokens, state.prompts.text_init)

    def test_cyclic_requires_visual_first(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend, mode="cyclic")
        with pytest.raises(ConfigurationError):
            adapt_text(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)

    def test_cyclic_phase_order_and_theta_freeze(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend, mode="cyclic")
        adapt_visual(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)
        digest_after_visual = state.theta.digest()
        adapt_text(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)
        assert state.theta.digest() == digest_after_visual  # s=2 freezes theta
        assert len(state.loss_trace) == 2


class TestConcurrent:
    def test_all_three_groups_move(self, micro_backend):
        vocab, cfg, state, x_t, ctx = make_world(micro_backend, mode="concurrent")
        theta_before = state.theta.digest()
        adapt_concurrent(x_t, ctx, state, cfg.adaptation, micro_backend, vocab)
        assert state.theta.digest() != theta_before
        assert not torch.equal(state.prompts.visual.delta,
                               torch.zeros_like(state.prompts.visual.delta))
        assert not torch.equal(state.prompts.text.tokens, state.prompts.text_init)


class TestPredict:
    def test_single_class(self, micro_backend):
        vocab, cfg, state, x_t, _ = make_world(micro_backend, n_classes=1)
        pred = predict(x_t, state, vocab, micro_backend)
        assert pred.class_index == 0
        assert pred.probs.probs[0] == 1.0

    def test_tie_break_lowest_index(self, micro_backend):
        vocab = build_vocabulary(micro_backend, ["amber", "amber", "amber"])
        cfg = StreamConfig(adaptation=AdaptationConfig())
        state = init_adaptation_state(micro_backend, vocab, cfg)
        rng = np.random.default_rng(1)
        pred = predict(random_image(rng, micro_backend.config, "t"), state, vocab, micro_backend)
        assert pred.class_index == 0


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kw",
        [
            {"mode": "sideways"},
            {"lr": -1.0},
            {"lam": -0.5},
            {"visual_steps": -1},
            {"mode": "cyclic", "cycle_steps": 3},
            {"optimizer": "sgd"},
        ],
    )
    def test_bad_adaptation_configs(self, kw):
        with pytest.raises(ConfigurationError):
            AdaptationConfig(**kw).validate()

    def test_oracle_requires_ablation_flag(self):
        cfg = StreamConfig(adaptation=AdaptationConfig(), label_mode="oracle")
        with pytest.raises(ConfigurationError):
            cfg.validate()
        StreamConfig(adaptation=AdaptationConfig(), label_mode="oracle", ablation=True).validate()

    @pytest.mark.parametrize("kw", [{"strategy": "psychic"}, {"label_mode": "telepathy"},
                                    {"variant": "holographic"}, {"n_context": -1}])
    def test_bad_stream_configs(self, kw):
        with pytest.raises(ConfigurationError):
            StreamConfig(adaptation=AdaptationConfig(), **kw).validate()


class TestRunStream:
    def test_empty_stream(self, micro_backend, micro_task, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        test = load_manifest(empty, split="test", class_list=micro_task["test"].class_list)
        report = run_stream(micro_backend, test, micro_task["labeled"],
                            StreamConfig(adaptation=AdaptationConfig()))
        assert report.total == 0 and report.accuracy is None

    def test_determinism(self, micro_backend, micro_task):
        cfg = StreamConfig(adaptation=AdaptationConfig(mode="cyclic"))
        a = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        b = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        assert a.digest() == b.digest()

    def test_lambda_zero_matches_no_examples_bitwise(self, micro_backend, micro_task):
        r_lam = run_stream(micro_backend, micro_task["test"], micro_task["labeled"],
                           StreamConfig(adaptation=AdaptationConfig(lam=0.0)))
        r_noex = run_stream(micro_backend, micro_task["test"], micro_task["labeled"],
                            StreamConfig(adaptation=AdaptationConfig(), label_mode="no-examples"))
        assert [s.predicted for s in r_lam.samples] == [s.predicted for s in r_noex.samples]
        assert [s.probs for s in r_lam.samples] == [s.probs for s in r_noex.samples]
        # lambda=0 pays for the context forward passes, no-examples does not
        assert r_lam.samples[0].counters["vision_calls"] > r_noex.samples[0].counters["vision_calls"]

    def test_online_causality_prefix(self, micro_backend, micro_task):
        lines = micro_task["dir"].joinpath("test.jsonl").read_text().splitlines()
        prefix = micro_task["dir"] / "prefix.jsonl"
        prefix.write_text("\n".join(lines[:7]) + "\n")
        short = load_manifest(prefix, split="test", class_list=micro_task["test"].class_list)
        cfg = StreamConfig(adaptation=AdaptationConfig(mode="cyclic"))
        full = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        part = run_stream(micro_backend, short, micro_task["labeled"], cfg)
        for a, b in zip(part.samples, full.samples[:7]):
            assert a.predicted == b.predicted
            assert a.probs == b.probs

    def test_theta_persistence_and_chain(self, micro_backend, micro_task):
        cfg = StreamConfig(adaptation=AdaptationConfig())
        a = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        digests = [s.theta_digest for s in a.samples]
        assert len(set(digests)) > 1  # theta accumulates across samples
        b = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        assert [s.theta_digest for s in b.samples] == digests  # same seed, same chain

    def test_theta_resumption(self, micro_backend, micro_task):
        cfg = StreamConfig(adaptation=AdaptationConfig())
        theta = init_token_net(micro_backend.config.d_l, micro_backend.config.d_v, cfg.adaptation.seed)
        first = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg, theta=theta)
        assert theta.digest() == first.theta_digest_after  # caller's object carries the final state
        second = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg, theta=theta)
        assert second.theta_digest_before == first.theta_digest_after

    def test_failed_sample_scored_unadapted(self, micro_backend, micro_task, monkeypatch):
        import incpl.adaptation as adaptation_mod

        real = adaptation_mod.combined_loss_terms
        target_id = micro_task["test"].records[3].path

        def sabotaged(backend, text_feats, x_pixels, ctx_pixels, ctx_labels, lam, **kw):
            if kw.get("sample_id") == target_id:
                raise NumericalFailureError("injected blowup", sample_id=kw.get("sample_id"))
            return real(backend, text_feats, x_pixels, ctx_pixels, ctx_labels, lam, **kw)

        monkeypatch.setattr(adaptation_mod, "combined_loss_terms", sabotaged)
        cfg = StreamConfig(adaptation=AdaptationConfig())
        report = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        failed = report.samples[3]
        assert failed.failed and "injected blowup" in failed.failure
        assert report.total == len(micro_task["test"].records)  # denominator stays honest
        # the token net rolls back: sample 3 ends where sample 2 ended
        assert failed.theta_digest == report.samples[2].theta_digest
        assert not report.samples[4].failed

    def test_n_context_exceeding_pool(self, micro_backend, micro_task):
        cfg = StreamConfig(adaptation=AdaptationConfig(), n_context=50)
        with pytest.raises(ConfigurationError):
            run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)

    def test_unpredictable_sample_still_counted(self, micro_backend, micro_task, monkeypatch):
        import torch as torch_mod

        import incpl.adaptation as adaptation_mod
        from incpl.data import load_image

        real = adaptation_mod.vision_embeddings
        target = micro_task["test"].records[2]
        poison = torch_mod.from_numpy(load_image(target).pixels).to(micro_backend.dtype)

        def sabotaged(backend, pixels, *args, **kw):
            # poison every forward of this one image: adaptation AND prediction fail
            if pixels.shape[0] == 1 and torch_mod.equal(pixels[0], poison):
                raise NumericalFailureError("encoder blowup", sample_id=target.path)
            return real(backend, pixels, *args, **kw)

        monkeypatch.setattr(adaptation_mod, "vision_embeddings", sabotaged)
        cfg = StreamConfig(adaptation=AdaptationConfig())
        report = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        bad = report.samples[2]
        assert bad.failed and bad.predicted == -1 and not bad.correct
        assert "prediction failed" in bad.failure
        assert report.total == len(micro_task["test"].records)
        assert not report.samples[3].failed

    def test_class_embedding_disk_cache(self, micro_backend, micro_task, tmp_path, monkeypatch):
        monkeypatch.setenv("INCPL_CACHE_DIR", str(tmp_path / "cache"))
        cfg = StreamConfig(adaptation=AdaptationConfig())
        cold = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        cached = list((tmp_path / "cache").glob("textfeats_*.npy"))
        assert cached, "disk cache not populated"
        warm = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        # disk hits skip the text encoder but never change predictions
        assert [s.predicted for s in warm.samples] == [s.predicted for s in cold.samples]
        assert [s.probs for s in warm.samples] == [s.probs for s in cold.samples]
        assert warm.samples[0].counters["text_batches"] == 0


class TestCostAccounting:
    @pytest.mark.parametrize(
        "mode,steps,vision_expected",
        [
            ("visual-only", 1, 7),   # (N+1)*S + 1 with N=5, S=1
            ("visual-only", 2, 13),
            ("cyclic", 1, 13),       # two phases of 6, plus the prediction
            ("text-only", 1, 7),
            ("concurrent", 1, 7),
        ],
    )
    def test_vision_calls_per_sample(self, micro_backend, micro_task, mode, steps, vision_expected):
        cfg = StreamConfig(
            adaptation=AdaptationConfig(mode=mode, visual_steps=steps), n_context=5
        )
        report = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        for s in report.samples:
            assert s.counters["vision_calls"] == vision_expected

    def test_text_batches_cyclic(self, micro_backend, micro_task):
        cfg = StreamConfig(adaptation=AdaptationConfig(mode="cyclic"), n_context=5)
        report = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        # S + 1 batches when a text phase runs: visual step, live text step, prediction
        for s in report.samples:
            assert s.counters["text_batches"] == 3

    def test_text_batches_visual_only_cached(self, micro_backend, micro_task):
        cfg = StreamConfig(adaptation=AdaptationConfig(), n_context=5)
        report = run_stream(micro_backend, micro_task["test"], micro_task["labeled"], cfg)
        assert report.samples[0].counters["text_batches"] == 1
        # P_t never changes in visual-only mode, so the cache holds thereafter
        for s in report.samples[1:]:
            assert s.counters["text_batches"] == 0
