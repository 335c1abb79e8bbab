"""Pre-training, two-stage fine-tuning and evaluation"""
import numpy as np
import pytest

from app.cli.common import build_task_service, init_model
from app.config import RunConfig
from app.core.errors import ConfigError, EmptySkillSetWarning, FrozenTensorError, OptimizerError, TaskError
from app.core.logging import MetricsLogger
from app.core.numcore import GradTape, Parameter
from app.models import mp2_model
from app.models.modular_prompt import draw_gates, sample_relaxed
from app.models.mp2_model import ModularPromptModel
from app.schemas.training import FinetuneConfig, PretrainConfig
from app.services import finetune_service
from app.services.analysis_service import cluster_routers, router_matrix, span_f1
from app.services.evaluation_service import evaluate, score_instances, summarize_scores
from app.services.finetune_service import (
    FinetuneService,
    ForwardCounter,
    FreezeGuard,
    Incumbent,
    active_mask,
    tensor_digest,
)
from app.services.pretrain_service import PretrainService, pretrain
from app.services.synthetic_suite import generate_synthetic_suite
from app.services.task_service import TaskService, span_to_label
from tests.conftest import make_model


def _digests(model, names=None):
    tensors = model.named_tensors()
    return {n: tensor_digest(t) for n, t in tensors.items() if names is None or n in names}


def _heldout(tiny_tasks):
    spec = tiny_tasks.suite.heldout[0]
    return spec, tiny_tasks.split(spec, seed=0, shots=8)


GRADIENT = dict(paradigm="gradient", stage1_budget=3, stage2_budget=3, stage1_lr=3e-2, stage2_lr=1e-2)
BLACKBOX = dict(paradigm="blackbox", total_budget=60, stage1_budget=10, stage2_budget=50, cma_visit_evals=20)


class TestVariantDefaults:
    def test_pretrain_deep_uses_fast_slow_rates(self):
        config = PretrainConfig()
        assert (config.fast_slow, config.router_lr, config.prompt_lr) == (True, 5e-4, 1e-4)

    def test_pretrain_shallow_uses_one_rate(self):
        config = PretrainConfig(variant="shallow")
        assert (config.fast_slow, config.router_lr, config.prompt_lr) == (False, 1e-3, 1e-3)

    def test_pretrain_without_fast_slow_defaults_to_one_rate(self):
        config = PretrainConfig(fast_slow=False)
        assert (config.router_lr, config.prompt_lr) == (1e-3, 1e-3)

    def test_finetune_shallow_defaults(self):
        config = FinetuneConfig(variant="shallow")
        assert (config.stage1_lr, config.stage2_lr, config.cma_sigma, config.cma_sigma_inner) == (1e-2, 3e-4, 0.1, 1e-2)

    def test_finetune_deep_defaults(self):
        config = FinetuneConfig(variant="deep", paradigm="blackbox")
        assert (config.stage1_lr, config.stage2_lr, config.cma_sigma) == (3e-3, 2e-5, 5e-2)
        assert config.stage1_budget == 100

    def test_explicit_values_win_over_the_variant(self):
        config = FinetuneConfig(variant="shallow", stage1_lr=0.2, cma_sigma=0.3)
        assert (config.stage1_lr, config.cma_sigma) == (0.2, 0.3)

    def test_temperature_reaches_finetuning_only_when_set(self):
        assert RunConfig().pretrain_config().tau == 0.5
        assert RunConfig().finetune_config().tau is None
        assert RunConfig(tau=0.3).finetune_config().tau == 0.3

    def test_non_positive_rates_rejected(self):
        with pytest.raises(ValueError):
            FinetuneConfig(stage2_lr=0.0)
        with pytest.raises(ValueError):
            PretrainConfig(router_lr=-1e-3)


class TestPretrain:
    def test_zero_steps_leaves_model_unchanged(self, tiny_tasks, tiny_model):
        before = _digests(tiny_model)
        summary = pretrain(tiny_model, tiny_tasks.suite.tasks, tiny_tasks.pretrain_pools(), PretrainConfig(steps=0, batch=4))
        assert _digests(tiny_model) == before
        assert summary.final_loss is None
        assert set(summary.task_accuracy) == {t.name for t in tiny_tasks.suite.tasks}

    def test_steps_update_routers_banks_and_body(self, tiny_tasks, tiny_model):
        before = _digests(tiny_model)
        metrics = MetricsLogger()
        config = PretrainConfig(steps=4, batch=4, log_every=2)
        summary = PretrainService(tiny_model, tiny_tasks.suite.tasks, tiny_tasks.pretrain_pools(), config, metrics).run()
        after = _digests(tiny_model)
        assert after["bank.0.intrinsic"] != before["bank.0.intrinsic"]
        assert after["encoder.tok_emb"] != before["encoder.tok_emb"]
        assert any(after[n] != before[n] for n in before if n.startswith("router."))
        assert np.isfinite(summary.final_loss)
        assert [r.step for r in metrics.records if r.task == "all"] == [2, 4]

    def test_single_rate_without_fast_slow(self):
        config = PretrainConfig(router_lr=1e-3, prompt_lr=1e-4, fast_slow=False)
        assert config.prompt_lr == config.router_lr

    def test_config_temperature_reaches_the_gates(self, tiny_tasks, tiny_model, monkeypatch):
        seen = []

        def recording(router, tau, rng):
            seen.append(tau)
            return draw_gates(router, tau, rng)

        monkeypatch.setattr(mp2_model, "draw_gates", recording)
        config = PretrainConfig(steps=2, batch=4, tau=0.2)
        PretrainService(tiny_model, tiny_tasks.suite.tasks, tiny_tasks.pretrain_pools(), config).run()
        assert seen and set(seen) == {0.2}
        seen.clear()
        tiny_model.sample_gates(0, np.random.default_rng(0))
        assert set(seen) == {tiny_model.tau}

    def test_variant_must_match_the_model(self, tiny_tasks, tiny_model):
        with pytest.raises(ConfigError):
            PretrainService(tiny_model, tiny_tasks.suite.tasks, tiny_tasks.pretrain_pools(), PretrainConfig(variant="shallow"))

    def test_fast_slow_changes_the_result(self, tiny_tasks):
        results = []
        for fast_slow in (True, False):
            model = make_model(tiny_tasks)
            config = PretrainConfig(steps=3, batch=4, router_lr=5e-2, prompt_lr=1e-3, fast_slow=fast_slow)
            PretrainService(model, tiny_tasks.suite.tasks, tiny_tasks.pretrain_pools(), config).run()
            results.append(_digests(model))
        assert results[0]["bank.0.intrinsic"] != results[1]["bank.0.intrinsic"]


class TestHelpers:
    def test_forward_counter_enforces_budget(self):
        counter = ForwardCounter(3)
        counter.charge(2)
        with pytest.raises(OptimizerError):
            counter.charge(2)
        assert counter.used == 2

    def test_incumbent_prefers_dev_then_loss(self):
        inc = Incumbent()
        assert inc.offer(0.5, 1.0, lambda: "a")
        assert not inc.offer(0.4, 0.1, lambda: "b")
        assert inc.offer(0.5, 0.9, lambda: "c")
        assert not inc.offer(0.5, 0.9, lambda: "d")
        assert inc.payload == "c"

    def test_freeze_guard_detects_changes(self):
        p = Parameter([1.0, 2.0], name="p")
        with pytest.raises(FrozenTensorError):
            with FreezeGuard({"p": p}):
                p.assign([1.0, 3.0])

    def test_empty_router_falls_back_to_largest_logit(self):
        with pytest.warns(EmptySkillSetWarning):
            mask = active_mask(np.array([-1.0, -2.0, -0.5]), 0)
        assert mask.tolist() == [0.0, 0.0, 1.0]


class TestGradientFinetune:
    def test_variant_must_match_the_model(self, tiny_tasks, tiny_model):
        spec, split = _heldout(tiny_tasks)
        with pytest.raises(ConfigError):
            FinetuneService(tiny_model, spec, split, FinetuneConfig(variant="shallow"))

    def test_stage_one_samples_at_the_config_temperature(self, tiny_tasks, tiny_model, monkeypatch):
        seen = []

        def recording(w, tau, u):
            seen.append(tau)
            return sample_relaxed(w, tau, u)

        monkeypatch.setattr(finetune_service, "sample_relaxed", recording)
        spec, split = _heldout(tiny_tasks)
        FinetuneService(tiny_model, spec, split, FinetuneConfig(**GRADIENT, tau=0.2)).finetune_router_stage()
        assert seen and set(seen) == {0.2}

    def test_router_stage_freezes_everything_else(self, tiny_tasks, tiny_model):
        spec, split = _heldout(tiny_tasks)
        service = FinetuneService(tiny_model, spec, split, FinetuneConfig(**GRADIENT))
        before = _digests(tiny_model)
        result = service.finetune_router_stage()
        after = _digests(tiny_model)
        assert all(after[n] == d for n, d in before.items())
        assert spec.task_id in tiny_model.routers
        assert result.steps == 3
        assert 0.0 <= result.best_dev <= 1.0

    def test_zero_budget_rejected(self, tiny_tasks, tiny_model):
        spec, split = _heldout(tiny_tasks)
        config = FinetuneConfig(paradigm="gradient", stage1_budget=0, stage2_budget=1)
        with pytest.raises(OptimizerError):
            FinetuneService(tiny_model, spec, split, config).finetune_router_stage()

    def test_prompt_stage_keeps_routers_and_inactive_prompts(self, tiny_tasks, tiny_model):
        spec, split = _heldout(tiny_tasks)
        service = FinetuneService(tiny_model, spec, split, FinetuneConfig(**GRADIENT))
        service.finetune_router_stage()
        routers = [r.w.name for r in tiny_model.routers[spec.task_id]]
        before = _digests(tiny_model)
        service.finetune_prompt_stage()
        after = _digests(tiny_model)
        assert all(after[n] == before[n] for n in routers)
        assert all(after[n] == before[n] for n in before)

        masks = [active_mask(r.w.data.astype(np.float64), i) for i, r in enumerate(tiny_model.routers[spec.task_id])]
        for bank, working, mask in zip(tiny_model.banks, service.stage2_prompts, masks):
            original = (bank.intrinsic.data @ bank.projection.data.T).reshape(working.materialized.shape)
            for k in np.flatnonzero(mask == 0):
                assert np.array_equal(working.materialized.data[k], original[k].astype(np.float32))

    def test_stage_two_never_lowers_best_dev(self, tiny_tasks, tiny_model):
        spec, split = _heldout(tiny_tasks)
        report = FinetuneService(tiny_model, spec, split, FinetuneConfig(**GRADIENT)).run()
        if all(any(m) for m in report.router_masks):
            assert report.stage2.best_dev >= report.stage1.best_dev
        assert report.test_score is not None

    def test_same_seed_same_result(self, tiny_tasks):
        spec, split = _heldout(tiny_tasks)
        scores = []
        for _ in range(2):
            model = make_model(tiny_tasks)
            report = FinetuneService(model, spec, split, FinetuneConfig(**GRADIENT)).run()
            scores.append((report.stage1.best_dev, report.stage2.best_dev, report.test_score))
        assert scores[0] == scores[1]


class TestBlackboxFinetune:
    def test_router_stage_searches_k_logits_per_bank(self, tiny_tasks, tiny_model):
        spec, split = _heldout(tiny_tasks)
        service = FinetuneService(tiny_model, spec, split, FinetuneConfig(**BLACKBOX))
        service.forwards = ForwardCounter(10)
        before = _digests(tiny_model)
        service.finetune_router_stage()
        after = _digests(tiny_model)
        assert all(after[n] == d for n, d in before.items())
        logits = [r.w.data for r in tiny_model.routers[spec.task_id]]
        assert [w.shape for w in logits] == [(tiny_model.K,)] * len(tiny_model.banks)
        assert all(np.all(np.abs(w) <= 3.0 + 1e-6) for w in logits)
        assert service.forwards.used <= 10

    def test_full_run_respects_budget_without_gradients(self, tiny_tasks, tiny_model):
        spec, split = _heldout(tiny_tasks)
        service = FinetuneService(tiny_model, spec, split, FinetuneConfig(**BLACKBOX))
        tapes = GradTape.constructed
        report = service.run()
        assert GradTape.constructed == tapes
        assert report.gradient_tapes == 0
        assert service.forwards.used <= 60
        assert report.stage1.forwards + report.stage2.forwards == service.forwards.used

    def test_stage_two_keeps_routers(self, tiny_tasks, tiny_model):
        spec, split = _heldout(tiny_tasks)
        service = FinetuneService(tiny_model, spec, split, FinetuneConfig(**BLACKBOX))
        service.forwards = ForwardCounter(60)
        service.finetune_router_stage()
        routers = [r.w.name for r in tiny_model.routers[spec.task_id]]
        before = _digests(tiny_model, routers)
        result = service.finetune_prompt_stage()
        assert _digests(tiny_model, routers) == before
        assert result.best_dev >= 0.0

    def test_stage_two_needs_two_forwards(self, tiny_tasks, tiny_model):
        spec, split = _heldout(tiny_tasks)
        config = FinetuneConfig(paradigm="blackbox", total_budget=20, stage1_budget=19, stage2_budget=1)
        with pytest.raises(OptimizerError):
            FinetuneService(tiny_model, spec, split, config).finetune_prompt_stage()

    def test_random_prompt_baseline(self, tiny_tasks, tiny_model):
        spec, split = _heldout(tiny_tasks)
        service = FinetuneService(tiny_model, spec, split, FinetuneConfig(**BLACKBOX))
        before = _digests(tiny_model)
        result = service.random_prompt_baseline(budget=40)
        assert _digests(tiny_model) == before
        assert result.stage == "baseline"
        assert result.forwards <= 40
        assert 0.0 <= result.test_score <= 1.0


class TestEvaluation:
    def test_empty_test_set_rejected(self, tiny_model):
        with pytest.raises(TaskError):
            evaluate(tiny_model, 0, [], "accuracy")

    def test_predictions_are_always_labels(self, tiny_tasks, tiny_model):
        spec = tiny_tasks.suite.tasks[0]
        instances = tiny_tasks.pool(spec)[:20]
        result = score_instances(tiny_model, tiny_model.task_prompts(spec.task_id), instances)
        for inst, span in zip(instances, result.predictions):
            assert span_to_label(inst, span, spec) in spec.labels

    def test_evaluate_is_deterministic(self, tiny_tasks, tiny_model):
        spec = tiny_tasks.suite.tasks[0]
        instances = tiny_tasks.pool(spec)[:20]
        assert evaluate(tiny_model, spec.task_id, instances) == evaluate(tiny_model, spec.task_id, instances)

    def test_summarize_scores(self):
        summary = summarize_scores([0.5, 0.7, 0.6, 0.8, 0.4])
        assert summary.mean == pytest.approx(0.6)
        assert summary.std == pytest.approx(np.std([0.5, 0.7, 0.6, 0.8, 0.4]))
        assert summary.n == 5

    def test_summarize_needs_scores(self):
        with pytest.raises(TaskError):
            summarize_scores([])


@pytest.fixture(scope="module")
def span_tasks():
    suite, generator = generate_synthetic_suite(
        seed=0, n_tasks=4, n_skills=3, n_groups=2, n_heldout=1, n_span_tasks=1, instances_per_task=120,
    )
    return TaskService(suite, generator)


def _span_spec(span_tasks):
    spec = span_tasks.suite.tasks[-1]
    assert spec.is_span
    return spec


class TestSpanTasks:
    def test_span_f1_is_mean_token_overlap(self, span_tasks):
        model = make_model(span_tasks)
        spec = _span_spec(span_tasks)
        instances = span_tasks.pool(spec)[:24]
        result = score_instances(model, model.task_prompts(spec.task_id), instances, "span_f1")
        expected = [
            span_f1(inst.span_tokens(tuple(span)), inst.span_tokens(tuple(inst.gold_span)))
            for inst, span in zip(instances, result.predictions)
        ]
        assert result.score == pytest.approx(float(np.mean(expected)))
        assert 0.0 <= result.score <= 1.0
        assert evaluate(model, spec.task_id, instances, "span_f1") == result.score

    def test_span_predictions_stay_in_context(self, span_tasks):
        model = make_model(span_tasks)
        spec = _span_spec(span_tasks)
        instances = span_tasks.pool(spec)[:24]
        result = score_instances(model, model.task_prompts(spec.task_id), instances, "span_f1")
        for inst, (s, e) in zip(instances, result.predictions):
            assert 0 <= s <= e < len(inst.context)

    def test_gold_spans_score_one(self, span_tasks):
        spec = _span_spec(span_tasks)
        for inst in span_tasks.pool(spec)[:10]:
            gold = inst.span_tokens(tuple(inst.gold_span))
            assert span_f1(gold, gold) == 1.0

    @pytest.mark.parametrize("paradigm", [GRADIENT, BLACKBOX], ids=["gradient", "blackbox"])
    def test_finetune_reports_span_f1(self, span_tasks, paradigm):
        model = make_model(span_tasks)
        spec = _span_spec(span_tasks)
        split = span_tasks.split(spec, seed=0, shots=8)
        report = FinetuneService(model, spec, split, FinetuneConfig(**paradigm)).run()
        assert report.metric == "span_f1"
        for result in (report.stage1, report.stage2):
            assert 0.0 <= result.best_dev <= 1.0
        assert report.stage2.best_dev >= report.stage1.best_dev
        assert report.test_score == pytest.approx(evaluate(model, spec.task_id, split.test, "span_f1"))
        assert 0.0 <= report.test_score <= 1.0


def _clone(model):
    return ModularPromptModel.from_tensors(model.snapshot(), {n: t.numpy() for n, t in model.named_tensors().items()})


@pytest.fixture(scope="module")
def pretrained():
    cfg = RunConfig()
    tasks = build_task_service(cfg)
    model = init_model(cfg, tasks)
    summary = pretrain(model, tasks.suite.tasks, tasks.pretrain_pools(), cfg.pretrain_config())
    return cfg, tasks, model, summary


@pytest.mark.slow
class TestAcceptance:
    def test_pretraining_fits_every_task(self, pretrained):
        _, _, _, summary = pretrained
        assert summary.mean_accuracy >= 0.9
        assert min(summary.task_accuracy.values()) >= 0.8

    def test_router_only_recovers_pretraining_accuracy(self, pretrained):
        cfg, tasks, model, _ = pretrained
        config = RunConfig(paradigm="bbt").finetune_config()
        for spec in tasks.suite.tasks[:3]:
            split = tasks.split(spec, seed=101, shots=32)
            reference = evaluate(model, spec.task_id, split.dev)
            report = FinetuneService(_clone(model), spec, split, config).run(("1",))
            assert report.stage2 is None
            assert report.stage1.best_dev >= 0.95 * reference

    def test_pretrained_prompts_beat_random_prompts_on_new_compositions(self, pretrained):
        cfg, tasks, model, _ = pretrained
        gaps = []
        for seed in range(5):
            config = RunConfig(paradigm="bbt", seed=seed).finetune_config()
            for spec in tasks.suite.heldout:
                split = tasks.split(spec, seed=seed, shots=32)
                service = FinetuneService(_clone(model), spec, split, config)
                report = service.run()
                baseline = service.random_prompt_baseline()
                gaps.append(report.test_score - baseline.test_score)
        assert np.mean(gaps) >= 0.10

    def test_second_stage_never_hurts_best_dev(self, pretrained):
        cfg, tasks, model, _ = pretrained
        config = cfg.finetune_config()
        for spec in tasks.suite.heldout:
            split = tasks.split(spec, seed=0, shots=32)
            report = FinetuneService(_clone(model), spec, split, config).run()
            assert report.stage2.best_dev >= report.stage1.best_dev
        for spec in tasks.suite.tasks[:3]:
            split = tasks.split(spec, seed=0, shots=32)
            router_only = FinetuneService(_clone(model), spec, split, config).run(("1",))
            both = FinetuneService(_clone(model), spec, split, config).run()
            assert router_only.stage1.best_dev >= both.stage2.best_dev - 0.02

    def test_routers_recover_planted_groups(self, pretrained):
        cfg, tasks, model, _ = pretrained
        specs = tasks.suite.tasks
        matrix = router_matrix(model, [t.task_id for t in specs])
        result = cluster_routers(matrix, cfg.n_groups, names=[t.name for t in specs], truth=[t.group for t in specs])
        assert result.adjusted_rand == pytest.approx(1.0)
