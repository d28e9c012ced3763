"""Command-line surface.

Subcommands: meta-train, multitask-train, mono-train, finetune, evaluate,
ablate, synth, sweep. Exit codes are a stable scripting contract: 0 success,
2 usage or configuration error, 3 training divergence.

Every training command writes a run directory containing the resolved config
snapshot, a line-delimited JSON metrics log (epoch, loss, per-language dev
accuracy), the vocabulary export, a model card, checkpoints (best parameters
plus a resumable training state), and a final report.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .ablation import MODES, AblationSpec, run_ablation
from .config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    experiment_config_to_payload,
    load_experiment_config,
)
from .data import ParseError, Vocabulary, load_dataset
from .evaluation import evaluate_model, predictions_for, write_predictions_tsv
from .params import load_checkpoint, save_checkpoint
from .pg import model_for
from .pipelines import (
    InitCache,
    evaluate_on_test,
    finetune_on_target,
    meta_initialization,
    mono_training,
    multitask_initialization,
    split_table,
)
from .synth import FamilySpecError, generate_synthetic_family, load_spec
from .training import TrainingDiverged, load_train_state, save_train_state


# ---------------------------------------------------------------------------
# run-directory plumbing

def _load_datasets(config: ExperimentConfig):
    datasets = []
    for lang in config.referenced_languages():
        for split, path in config.languages[lang].items():
            try:
                datasets.append(load_dataset(path, lang, split))
            except ParseError as err:
                raise ConfigError(f"{path}: {err}") from err
    return datasets


class RunDir:
    def __init__(self, path):
        self.path = path
        os.makedirs(os.path.join(path, "checkpoints"), exist_ok=True)
        self._metrics = open(os.path.join(path, "metrics.jsonl"), "w",
                             encoding="utf-8")

    def snapshot_config(self, config: ExperimentConfig) -> None:
        with open(os.path.join(self.path, "config.json"), "w", encoding="utf-8") as fh:
            json.dump(experiment_config_to_payload(config), fh, indent=2,
                      sort_keys=True)

    def on_epoch(self, state, entry) -> None:
        self._metrics.write(json.dumps(entry, sort_keys=True) + "\n")
        self._metrics.flush()

    def write_json(self, name: str, payload) -> None:
        with open(os.path.join(self.path, name), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    def write_text(self, name: str, text: str) -> None:
        with open(os.path.join(self.path, name), "w", encoding="utf-8") as fh:
            fh.write(text)

    def close(self):
        self._metrics.close()


def _finish_run(run: RunDir, config: ExperimentConfig, state, vocab, model_cfg,
                test_report=None) -> str:
    cfg_hash = config_hash(config.model, config.training)
    vocab_hash = vocab.content_hash()
    run.write_text("vocab.json", vocab.to_json())
    run.write_json("model_card.json", {
        "kind": model_cfg.kind,
        "embed_dim": model_cfg.embed_dim,
        "hidden_dim": model_cfg.hidden_dim,
        "attn_dim": model_cfg.attn_dim,
        "vocab_size": len(vocab),
        "vocab_hash": vocab_hash,
    })
    best_path = os.path.join(run.path, "checkpoints", "best.ckpt")
    save_checkpoint(best_path, state.best_params, kind=model_cfg.kind,
                    vocab_hash=vocab_hash, config_hash=cfg_hash,
                    seed=config.training.seed,
                    extra={"best_epoch": state.best_epoch,
                           "best_dev_accuracy": state.best_accuracy})
    save_train_state(os.path.join(run.path, "checkpoints", "state.ckpt"), state,
                     kind=model_cfg.kind, vocab_hash=vocab_hash,
                     config_hash=cfg_hash, seed=config.training.seed)
    report = {
        "epochs": state.epoch,
        "best_epoch": state.best_epoch,
        "best_dev_accuracy": state.best_accuracy,
        "config_hash": cfg_hash,
        "vocab_hash": vocab_hash,
        "checkpoint": best_path,
    }
    if test_report is not None:
        report["test"] = json.loads(test_report.to_json())
    run.write_json("report.json", report)
    return best_path


def _run_training(args, stage: str) -> int:
    config = _config_from_args(args)
    datasets = _load_datasets(config)
    table = split_table(datasets)
    cache = InitCache(getattr(args, "cache_dir", None))
    include_target = bool(getattr(args, "include_target", False))
    run = RunDir(config.output_dir)
    run.snapshot_config(config)
    try:
        if stage == "meta":
            state, vocab = meta_initialization(
                config.model, config.training, table, list(config.sources),
                config.target, list(config.dev_languages), cache,
                on_epoch=run.on_epoch)
        elif stage == "multitask":
            languages = list(config.sources)
            if include_target:
                if not config.target:
                    raise ConfigError("--include-target needs a target language")
                languages.append(config.target)
            state, vocab = multitask_initialization(
                config.model, config.training, table, languages,
                target_lang=None if include_target else config.target,
                cache=cache, on_epoch=run.on_epoch)
        else:  # mono
            if not config.target:
                raise ConfigError("mono-train needs a target language")
            state, vocab = mono_training(config.model, config.training, table,
                                         config.target, cache, on_epoch=run.on_epoch)

        test_report = None
        evaluate_target = {"meta": False, "multitask": include_target,
                           "mono": True}[stage]
        if evaluate_target and config.target and \
                (config.target, "test") in table:
            test_report = evaluate_on_test(config.model, state, vocab, table,
                                           config.target,
                                           cfg_hash=config_hash(config.model,
                                                                config.training))
            print(f"accuracy={test_report.accuracy:.4f}")
        _finish_run(run, config, state, vocab, config.model, test_report)
        return 0
    finally:
        run.close()


def cmd_meta_train(args) -> int:
    return _run_training(args, "meta")


def cmd_multitask_train(args) -> int:
    return _run_training(args, "multitask")


def cmd_mono_train(args) -> int:
    return _run_training(args, "mono")


def cmd_finetune(args) -> int:
    config = _config_from_args(args)
    if not config.target:
        raise ConfigError("finetune needs a target language")
    datasets = _load_datasets(config)
    table = split_table(datasets)

    ckpt_dir = os.path.dirname(os.path.abspath(args.init_checkpoint))
    vocab_path = args.vocab or os.path.join(ckpt_dir, "..", "vocab.json")
    if not os.path.exists(vocab_path):
        raise ConfigError(f"vocabulary export not found at {vocab_path}")
    with open(vocab_path, encoding="utf-8") as fh:
        vocab = Vocabulary.from_json(fh.read())

    state_path = args.init_checkpoint
    try:
        try:
            init_state, header = load_train_state(state_path)
        except KeyError:
            # a bare parameter checkpoint (best.ckpt) also works as an init
            from .training import fresh_state

            params, header = load_checkpoint(state_path)
            init_state = fresh_state(params, None, config.training.seed)
    except (ValueError, OSError) as err:
        raise ConfigError(f"cannot read initialization checkpoint: {err}") from err
    if header["vocab_hash"] != vocab.content_hash():
        raise ConfigError("checkpoint vocabulary hash does not match vocab.json")
    if config.target not in vocab.lang_ids:
        raise ConfigError(
            f"vocabulary does not reserve the target language {config.target!r}")

    run = RunDir(config.output_dir)
    run.snapshot_config(config)
    try:
        state = finetune_on_target(config.model, config.training, table,
                                   init_state, vocab, config.target,
                                   on_epoch=run.on_epoch)
        test_report = None
        if (config.target, "test") in table:
            test_report = evaluate_on_test(config.model, state, vocab, table,
                                           config.target,
                                           cfg_hash=config_hash(config.model,
                                                                config.training))
            print(f"accuracy={test_report.accuracy:.4f}")
        _finish_run(run, config, state, vocab, config.model, test_report)
        return 0
    finally:
        run.close()


def cmd_evaluate(args) -> int:
    try:
        params, header = load_checkpoint(args.checkpoint)
    except (ValueError, OSError) as err:
        raise ConfigError(f"cannot read checkpoint: {err}") from err
    vocab_path = args.vocab or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), "..", "vocab.json")
    if not os.path.exists(vocab_path):
        raise ConfigError(f"vocabulary export not found at {vocab_path}")
    with open(vocab_path, encoding="utf-8") as fh:
        vocab = Vocabulary.from_json(fh.read())
    if header["vocab_hash"] != vocab.content_hash():
        raise ConfigError("checkpoint vocabulary hash does not match vocab.json")

    try:
        dataset = load_dataset(args.data, args.language, args.split)
    except ParseError as err:
        raise ConfigError(f"{args.data}: {err}") from err
    if len(dataset) == 0:
        raise ConfigError("evaluation over zero examples is undefined")

    from .config import ModelConfig

    card_path = os.path.join(os.path.dirname(vocab_path), "model_card.json")
    if os.path.exists(card_path):
        with open(card_path, encoding="utf-8") as fh:
            card = json.load(fh)
        model_cfg = ModelConfig(kind=card["kind"], embed_dim=card["embed_dim"],
                                hidden_dim=card["hidden_dim"],
                                attn_dim=card["attn_dim"])
    else:
        raise ConfigError(f"model card not found at {card_path}")

    model = model_for(model_cfg.kind, model_cfg, len(vocab))
    report = evaluate_model(model, params, vocab, dataset,
                            strategy=args.strategy, beam_width=args.beam_width,
                            checkpoint_hash=header.get("config_hash", ""),
                            expected_vocab_hash=header["vocab_hash"])
    print(f"accuracy={report.accuracy:.4f}")
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "eval_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    preds, _, _ = predictions_for(model, params, vocab, dataset,
                                  args.strategy, args.beam_width)
    write_predictions_tsv(os.path.join(out_dir, "predictions.tsv"), dataset, preds)
    return 0


def cmd_ablate(args) -> int:
    config = _config_from_args(args)
    if not config.target:
        raise ConfigError("ablate needs a target language")
    families = _parse_families(args.families)
    datasets = _load_datasets(config)
    cache = InitCache(args.cache_dir)
    try:
        spec = AblationSpec(target=config.target, mode=args.mode, families=families)
        report = run_ablation(spec, config.model, config.training, datasets,
                              regime=args.regime, cache=cache)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    print(f"accuracy={report.accuracy:.4f}")
    os.makedirs(config.output_dir, exist_ok=True)
    out = os.path.join(config.output_dir, f"ablation_{args.mode}.json")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    return 0


def _parse_families(text: str) -> tuple:
    pairs = []
    for item in text.split(","):
        lang, _, family = item.partition("=")
        if not lang or not family:
            raise ConfigError(f"bad family assignment {item!r}; use lang=family")
        pairs.append((lang.strip(), family.strip()))
    return tuple(pairs)


def cmd_synth(args) -> int:
    try:
        spec = load_spec(args.spec)
    except (FamilySpecError, FileNotFoundError) as err:
        raise ConfigError(f"invalid family spec: {err}") from err
    datasets = generate_synthetic_family(spec, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    from .data import serialize_dataset

    for ds in datasets:
        path = os.path.join(args.out, f"{ds.language}.{ds.split}.tsv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(serialize_dataset(ds))
    print(f"wrote {len(datasets)} datasets to {args.out}")
    return 0


def _sweep_child(payload):
    argv, = payload
    return main(argv)


def cmd_sweep(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError("no seeds given")
    config = _config_from_args(args)  # validate once up front
    jobs = []
    for seed in seeds:
        run_dir = os.path.join(config.output_dir, f"seed-{seed}")
        argv = [args.train_command, "--config", args.config,
                "--seed", str(seed), "--output-dir", run_dir]
        if args.cache_dir:
            argv += ["--cache-dir", args.cache_dir]
        jobs.append((argv,))
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            codes = list(pool.map(_sweep_child, jobs))
    else:
        codes = [_sweep_child(job) for job in jobs]
    failed = [seeds[i] for i, code in enumerate(codes) if code != 0]
    if failed:
        print(f"failed seeds: {failed}", file=sys.stderr)
        return max(codes)
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _config_from_args(args) -> ExperimentConfig:
    overrides = {name: getattr(args, name, None) for name in (
        "seed", "inner_lr", "outer_lr", "inner_steps", "inner_batch",
        "meta_epochs", "multitask_epochs", "mono_epochs", "batch_size",
        "finetune_min_epochs", "finetune_extension", "native_lr", "clip_norm",
        "outer_optimizer", "embedding_init", "model_kind", "embed_dim",
        "hidden_dim", "output_dir", "regime", "target",
    )}
    return load_experiment_config(args.config, overrides)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--output-dir", dest="output_dir", help="run directory (flag wins)")
    p.add_argument("--seed", type=int, help="training seed (flag wins)")
    p.add_argument("--target", help="target language (flag wins)")
    p.add_argument("--cache-dir", dest="cache_dir",
                   help="cache directory for trained initializations")
    hyper = p.add_argument_group("hyperparameter overrides (flags win)")
    for flag, kind in (
        ("--inner-lr", float), ("--outer-lr", float), ("--inner-steps", int),
        ("--inner-batch", int), ("--meta-epochs", int), ("--multitask-epochs", int),
        ("--mono-epochs", int), ("--batch-size", int),
        ("--finetune-min-epochs", int), ("--finetune-extension", int),
        ("--native-lr", float), ("--clip-norm", float),
        ("--embed-dim", int), ("--hidden-dim", int),
    ):
        hyper.add_argument(flag, type=kind, dest=flag[2:].replace("-", "_"))
    hyper.add_argument("--outer-optimizer", dest="outer_optimizer",
                       choices=("sgd", "adam", "adadelta"))
    hyper.add_argument("--embedding-init", dest="embedding_init")
    hyper.add_argument("--model-kind", dest="model_kind", choices=("med", "pg"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metainflect",
        description="Cross-lingual morphological inflection with meta-learned "
                    "initializations.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("meta-train", help="meta-train an initialization on the "
                                          "source languages")
    _add_config_flags(p)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("multitask-train", help="jointly train on the source "
                                               "languages")
    _add_config_flags(p)
    p.add_argument("--include-target", action="store_true",
                   help="include the target language's data in joint training")
    p.set_defaults(func=cmd_multitask_train)

    p = sub.add_parser("mono-train", help="train on the target language only")
    _add_config_flags(p)
    p.set_defaults(func=cmd_mono_train)

    p = sub.add_parser("finetune", help="fine-tune an initialization on the "
                                        "target language")
    _add_config_flags(p)
    p.add_argument("--init-checkpoint", required=True,
                   help="training state checkpoint (state.ckpt) to start from")
    p.add_argument("--vocab", help="vocabulary export (default: next to checkpoint)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="TSV file to evaluate on")
    p.add_argument("--language", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--vocab", help="vocabulary export (default: next to checkpoint)")
    p.add_argument("--strategy", default="greedy", choices=("greedy", "beam"))
    p.add_argument("--beam-width", dest="beam_width", type=int, default=5)
    p.add_argument("--out", help="directory for report and predictions")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train/evaluate one source-set ablation mode")
    _add_config_flags(p)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--families", required=True,
                   help="comma-separated lang=family assignments, every language "
                        "exactly once")
    p.add_argument("--regime", default="maml+ft",
                   choices=("maml+ft", "multitask+ft"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="generate a synthetic language family")
    p.add_argument("--spec", required=True, help="family spec JSON")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory for TSV files")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="run one training command over several seeds")
    _add_config_flags(p)
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.add_argument("--parallel", type=int, default=1,
                   help="number of parallel child runs")
    p.add_argument("--train-command", dest="train_command", default="mono-train",
                   choices=("meta-train", "multitask-train", "mono-train"),
                   help="which training command to sweep")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FamilySpecError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingDiverged as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
