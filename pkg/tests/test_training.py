import numpy as np
import pytest

from metainflect.config import MetaConfig, ModelConfig
from metainflect.data import Vocabulary, build_vocabulary, parse_dataset
from metainflect.params import ParamSet
from metainflect.pg import PgModel
from metainflect.training import (
    ExtensionSchedule,
    TaskHandle,
    Trainer,
    fresh_state,
    init_target_language_embedding,
    load_train_state,
    model_grad_fn,
    save_train_state,
    simulate_schedule,
)


def dummy_task(n=40, language="lang"):
    lines = "\n".join(f"stem{i:02d}\tstem{i:02d}x\tT" for i in range(n))
    return TaskHandle(language, parse_dataset(lines, language))


def quadratic_grad_fn(center):
    """Closed-form gradients for 0.5 * ||theta - c||^2; batches are ignored."""
    c = np.asarray(center, dtype=np.float64)

    def fn(params, examples):
        diff = np.asarray(params["theta"]) - c
        return float(0.5 * np.sum(diff * diff)), {"theta": diff}

    return fn


def quad_cfg(**kw):
    defaults = dict(inner_lr=0.1, outer_lr=0.1, inner_steps=1, inner_batch=2,
                    meta_epochs=1, seed=0)
    defaults.update(kw)
    return MetaConfig(**defaults)


class TestInnerAdapt:
    def test_matches_geometric_contraction(self):
        # two plain GD steps on the quadratic contract theta toward c by (1-eta)^2
        c = np.array([2.0, -1.0, 0.5])
        theta0 = np.array([1.0, 1.0, 1.0])
        trainer = Trainer(quadratic_grad_fn(c), quad_cfg(inner_steps=2))
        out = trainer.inner_adapt(ParamSet({"theta": theta0}), dummy_task(),
                                  np.random.default_rng(0))
        expected = c + 0.81 * (theta0 - c)
        np.testing.assert_allclose(out["theta"], expected, atol=1e-10)

    def test_zero_gradient_is_fixed_point(self):
        c = np.array([1.0, 2.0])
        trainer = Trainer(quadratic_grad_fn(c), quad_cfg())
        out = trainer.inner_adapt(ParamSet({"theta": c.copy()}), dummy_task(),
                                  np.random.default_rng(0))
        np.testing.assert_array_equal(out["theta"], c)

    def test_caller_parameters_untouched(self):
        theta = ParamSet({"theta": np.array([3.0])})
        trainer = Trainer(quadratic_grad_fn([0.0]), quad_cfg(inner_steps=3))
        trainer.inner_adapt(theta, dummy_task(), np.random.default_rng(1))
        np.testing.assert_array_equal(theta["theta"], [3.0])

    def test_same_seed_same_result(self):
        vocab, model, task = _tiny_pg_setup()
        trainer = Trainer(model_grad_fn(model, vocab),
                          quad_cfg(inner_steps=2, inner_batch=4))
        theta = model.init_params(seed=3)
        a = trainer.inner_adapt(theta, task, np.random.default_rng(11))
        b = trainer.inner_adapt(theta, task, np.random.default_rng(11))
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])


class TestMetaStep:
    def setup_method(self):
        self.trainer = Trainer(quadratic_grad_fn([0.0]), quad_cfg())
        self.theta = ParamSet({"theta": np.array([1.0])})

    def _outer(self):
        from metainflect.optim import init_optimizer

        return init_optimizer("sgd", self.theta, lr=0.1)

    def test_first_order_update_value(self):
        # theta=1, c=0, k=1, eta=eta'=0.1: adapted 0.9, first-order meta
        # gradient 0.9, so theta becomes 1 - 0.1*0.9 = 0.91
        theta, _, _ = self.trainer.meta_step(self.theta, dummy_task(),
                                             np.random.default_rng(0), self._outer())
        assert abs(theta["theta"][0] - 0.91) < 1e-10

    def test_differs_from_second_order_value(self):
        # the exact meta gradient is (1-eta)*theta_k = 0.81 giving 0.919; the
        # first-order path must not reproduce it
        theta, _, _ = self.trainer.meta_step(self.theta, dummy_task(),
                                             np.random.default_rng(0), self._outer())
        assert abs(theta["theta"][0] - 0.919) > 1e-3

    def test_zero_heldout_gradient_keeps_theta(self):
        trainer = Trainer(quadratic_grad_fn([1.0]), quad_cfg())
        theta = ParamSet({"theta": np.array([1.0])})  # already at the optimum
        out, _, _ = trainer.meta_step(theta, dummy_task(),
                                      np.random.default_rng(0), self._outer())
        np.testing.assert_array_equal(out["theta"], [1.0])

    def test_outer_step_applies_heldout_gradient_to_original_theta(self):
        # with SGD outside: theta_new = theta - eta' * (theta_k - c)
        c = np.array([0.25])
        trainer = Trainer(quadratic_grad_fn(c), quad_cfg(inner_steps=2))
        theta = ParamSet({"theta": np.array([2.0])})
        theta_k = trainer.inner_adapt(theta, dummy_task(), np.random.default_rng(5))
        out, _, _ = trainer.meta_step(theta, dummy_task(),
                                      np.random.default_rng(5), self._outer())
        expected = theta["theta"] - 0.1 * (theta_k["theta"] - c)
        np.testing.assert_allclose(out["theta"], expected, atol=1e-12)


def _tiny_pg_setup(n=40, language="ident", seed=0, hidden=8):
    lines = "\n".join(
        f"{stem}\t{stem}\tID" for stem in _stems(n, seed)
    )
    ds = parse_dataset(lines, language)
    vocab = build_vocabulary([ds])
    model = PgModel(
        ModelConfig(kind="pg", embed_dim=hidden, hidden_dim=hidden, attn_dim=hidden),
        len(vocab),
    )
    task = TaskHandle(language, ds)
    return vocab, model, task


def _stems(n, seed):
    rng = np.random.default_rng(seed)
    letters = "abdegilmnorstu"
    out = []
    seen = set()
    while len(out) < n:
        stem = "".join(letters[i] for i in rng.integers(0, len(letters),
                                                        rng.integers(3, 7)))
        if stem not in seen:
            seen.add(stem)
            out.append(stem)
    return out


class TestMamlTraining:
    def test_single_task_identity_converges_on_train(self):
        # degenerate single-task meta-training; scored after the k-step
        # adaptation the initialization is optimized for
        vocab, model, task = _tiny_pg_setup(n=40, hidden=12)
        cfg = MetaConfig(inner_lr=0.1, outer_lr=1e-2, inner_steps=2, inner_batch=3,
                         meta_epochs=60, seed=1, eval_every_epoch=False,
                         outer_optimizer="adam")
        trainer = Trainer(model_grad_fn(model, vocab), cfg)
        state = trainer.maml_train([task], init_params=model.init_params(seed=1))
        from metainflect.evaluation import evaluate_model

        adapted = trainer.inner_adapt(state.params, task, np.random.default_rng(99))
        report = evaluate_model(model, adapted, vocab, task.train)
        assert report.accuracy >= 0.99

    def test_fixed_seed_bit_identical(self):
        vocab, model, task = _tiny_pg_setup(n=20)
        cfg = MetaConfig(inner_lr=0.3, outer_lr=0.3, inner_steps=1, inner_batch=5,
                         meta_epochs=2, seed=7, eval_every_epoch=False)
        runs = []
        for _ in range(2):
            trainer = Trainer(model_grad_fn(model, vocab), cfg)
            state = trainer.maml_train([task], init_params=model.init_params(seed=7))
            runs.append(state.params)
        for name in runs[0]:
            np.testing.assert_array_equal(runs[0][name], runs[1][name])

    def test_requires_tasks(self):
        trainer = Trainer(quadratic_grad_fn([0.0]), quad_cfg())
        with pytest.raises(ValueError):
            trainer.maml_train([], init_params=ParamSet({"theta": np.zeros(1)}))


class TestJointTraining:
    def test_single_task_multitask_equals_monolingual(self):
        vocab, model, task = _tiny_pg_setup(n=16)
        cfg = MetaConfig(seed=3, batch_size=4, mono_epochs=3, eval_every_epoch=False)
        init = model.init_params(seed=3)
        a = Trainer(model_grad_fn(model, vocab), cfg).multitask_train(
            [task], "adam", epochs=3, init_params=init)
        c = Trainer(model_grad_fn(model, vocab), cfg).train_monolingual(
            task, "adam", init_params=init)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], c.params[name])

    def test_zero_epoch_budget_returns_initialization(self):
        vocab, model, task = _tiny_pg_setup(n=8)
        cfg = MetaConfig(seed=0, mono_epochs=0, eval_every_epoch=False)
        init = model.init_params(seed=0)
        state = Trainer(model_grad_fn(model, vocab), cfg).train_monolingual(
            task, "adam", init_params=init)
        for name in init:
            np.testing.assert_array_equal(state.params[name], init[name])

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        vocab, model, task = _tiny_pg_setup(n=16)
        cfg = MetaConfig(seed=5, batch_size=4, eval_every_epoch=False)
        init = model.init_params(seed=5)
        grad_fn = model_grad_fn(model, vocab)

        straight = Trainer(grad_fn, cfg).multitask_train(
            [task], "adam", epochs=4, init_params=init)

        half = Trainer(grad_fn, cfg).multitask_train(
            [task], "adam", epochs=2, init_params=init)
        path = tmp_path / "state.ckpt"
        save_train_state(path, half, kind="pg", vocab_hash=vocab.content_hash(),
                         config_hash="c", seed=5)
        loaded, _ = load_train_state(path)
        resumed = Trainer(grad_fn, cfg).multitask_train(
            [task], "adam", epochs=4, state=loaded)

        assert resumed.epoch == straight.epoch == 4
        for name in straight.params:
            np.testing.assert_array_equal(resumed.params[name], straight.params[name])

    def test_maml_resume_reproduces_uninterrupted_run(self, tmp_path):
        vocab, model, task = _tiny_pg_setup(n=20)
        grad_fn = model_grad_fn(model, vocab)
        cfg4 = MetaConfig(inner_lr=0.3, outer_lr=0.3, inner_steps=1, inner_batch=5,
                          meta_epochs=4, seed=11, eval_every_epoch=False)
        cfg2 = MetaConfig(inner_lr=0.3, outer_lr=0.3, inner_steps=1, inner_batch=5,
                          meta_epochs=2, seed=11, eval_every_epoch=False)
        init = model.init_params(seed=11)

        straight = Trainer(grad_fn, cfg4).maml_train([task], init_params=init)
        half = Trainer(grad_fn, cfg2).maml_train([task], init_params=init)
        path = tmp_path / "meta.ckpt"
        save_train_state(path, half, kind="pg", vocab_hash=vocab.content_hash(),
                         config_hash="c", seed=11)
        loaded, _ = load_train_state(path)
        resumed = Trainer(grad_fn, cfg4).maml_train([task], state=loaded)

        for name in straight.params:
            np.testing.assert_array_equal(resumed.params[name], straight.params[name])


class TestExtensionSchedule:
    def test_minimum_always_runs(self):
        # no improvement at all: exactly the minimum
        total = simulate_schedule(iter([0.0] * 1000), 300, 100)
        assert total == 300

    def test_flat_after_improvement_inside_window_stops_at_one_extension(self):
        trace = [1.0 if e == 250 else 0.0 for e in range(1, 1001)]
        total = simulate_schedule(iter(trace), 300, 100)
        assert total == 400

    def test_improvement_before_window_does_not_extend(self):
        trace = [1.0 if e == 150 else 0.0 for e in range(1, 1001)]
        total = simulate_schedule(iter(trace), 300, 100)
        assert total == 300

    def test_late_improvement_extends_past_400(self):
        accs = []
        for e in range(1, 1001):
            if e == 250:
                accs.append(0.5)
            elif e == 350:
                accs.append(0.8)
            else:
                accs.append(0.0)
        total = simulate_schedule(iter(accs), 300, 100)
        assert total == 500

    def test_zero_extension_never_extends(self):
        trace = [float(e) for e in range(1, 1001)]  # improves every epoch
        assert simulate_schedule(iter(trace), 10, 0) == 10

    def test_monotone_improvement_keeps_extending(self):
        sched = ExtensionSchedule(5, 3)
        epoch = 0
        while sched.should_continue(epoch + 1) and epoch < 50:
            epoch += 1
            sched.record(epoch, improved=True)
        assert epoch == 50  # still running, budget grows forever

    def test_finetune_run_length_matches_simulation(self):
        # drive the real fine-tune loop with a scripted dev scorer:
        # improvements at 1, 4 and 7 extend a min-5/ext-2 run to exactly 9
        trace = {1: 0.1, 4: 0.3, 7: 0.35}
        cfg = MetaConfig(seed=2, batch_size=4, finetune_min_epochs=5,
                         finetune_extension=2, eval_every_epoch=True)
        vocab, model, task = _tiny_pg_setup(n=12)
        dev = parse_dataset("abc\tabc\tID", task.language, split="dev")
        task = TaskHandle(task.language, task.train, dev)

        def scripted_scorer(params, t):
            return trace.get(scripted_scorer.epoch, 0.0)

        def on_epoch(state, entry):
            scripted_scorer.epoch = state.epoch + 1

        scripted_scorer.epoch = 1
        trainer = Trainer(model_grad_fn(model, vocab), cfg,
                          dev_scorer=scripted_scorer)
        state = trainer.finetune(model.init_params(seed=2), task, "adam",
                                 on_epoch=on_epoch)
        expected = simulate_schedule((trace.get(e, 0.0) for e in range(1, 100)), 5, 2)
        assert expected == 9
        assert state.epoch == expected
        assert state.best_epoch == 7
        assert state.best_accuracy == pytest.approx(0.35)


class TestTargetEmbeddingInit:
    def _vocab_and_params(self, languages, embed=2):
        datasets = [parse_dataset("ab\tab\tT", lang) for lang in languages[:-1]]
        vocab = build_vocabulary(datasets, extra_languages=[languages[-1]])
        emb = np.zeros((len(vocab), embed))
        return vocab, emb

    def test_mean_of_two_sources(self):
        vocab, emb = self._vocab_and_params(["l1", "l2", "target"])
        emb[vocab.lang_ids["l1"]] = [1.0, 0.0]
        emb[vocab.lang_ids["l2"]] = [0.0, 1.0]
        params = ParamSet({"emb": emb})
        out = init_target_language_embedding(params, vocab, "target", "mean")
        np.testing.assert_allclose(out["emb"][vocab.lang_ids["target"]], [0.5, 0.5])

    def test_single_source_copies_it(self):
        vocab, emb = self._vocab_and_params(["only", "target"])
        emb[vocab.lang_ids["only"]] = [0.7, -0.3]
        out = init_target_language_embedding(ParamSet({"emb": emb}), vocab,
                                             "target", "mean")
        np.testing.assert_allclose(out["emb"][vocab.lang_ids["target"]], [0.7, -0.3])

    def test_random_mode_reproducible(self):
        vocab, emb = self._vocab_and_params(["l1", "target"])
        params = ParamSet({"emb": emb})
        a = init_target_language_embedding(params, vocab, "target", "random", seed=4)
        c = init_target_language_embedding(params, vocab, "target", "random", seed=4)
        np.testing.assert_array_equal(a["emb"], c["emb"])

    def test_copy_mode(self):
        vocab, emb = self._vocab_and_params(["l1", "l2", "target"])
        emb[vocab.lang_ids["l2"]] = [0.2, 0.4]
        out = init_target_language_embedding(ParamSet({"emb": emb}), vocab,
                                             "target", "copy:l2")
        np.testing.assert_allclose(out["emb"][vocab.lang_ids["target"]], [0.2, 0.4])

    def test_unknown_language_rejected(self):
        vocab, emb = self._vocab_and_params(["l1", "target"])
        with pytest.raises(ValueError):
            init_target_language_embedding(ParamSet({"emb": emb}), vocab,
                                           "nope", "mean")


class TestTaskHandle:
    def test_rejects_overlapping_dev(self):
        ds = parse_dataset("ab\tab\tT\ncd\tcd\tT", "l")
        dev = parse_dataset("ab\tab\tT", "l", split="dev")
        with pytest.raises(ValueError, match="share"):
            TaskHandle("l", ds, dev)

    def test_rejects_empty_train(self):
        ds = parse_dataset("", "l")
        with pytest.raises(ValueError):
            TaskHandle("l", ds)
