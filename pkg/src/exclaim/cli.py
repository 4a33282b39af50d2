"""Command-line surface: train / predict / eval / analyze / generate workflows.

Every command is deterministic given identical inputs and seeds, never
mutates its inputs, and exits 0 on success, 2 on configuration or usage
errors, 3 on data errors, 4 on numerical errors. Module errors are
reported as a single machine-parseable stderr line ``error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

from . import corpus, embeddings, evaluation, synthgen, training
from .entity_typing import EntityScheme, SchemeVariant
from .errors import ConfigError, DataError, ExclaimError, NumericalError
from .model import ModelConfig, instance_inputs, predict

_MODEL_KEYS = {
    "d_w", "d_p", "d_e", "C", "scheme", "el_threshold",
    "use_projection", "use_attention", "entity_onehot", "k",
}
_TRAINING_KEYS = {
    "learning_rate", "epochs", "batch_size",
    "adam_beta1", "adam_beta2", "adam_eps", "seed", "max_len",
}
_RUN_KEYS = {"train_data", "val_data", "store", "model", "training"}
_SPEC_KEYS = {
    "rule", "n_instances", "languages", "length_range", "vocab_size",
    "positive_rate", "seed", "embed_dim", "splits", "pairing",
}


def _read_json(path: Path) -> dict:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return obj


def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _model_config_from_json(data: dict, where: str) -> ModelConfig:
    _reject_unknown(data, _MODEL_KEYS, where)
    if "d_w" not in data or "scheme" not in data:
        raise ConfigError(f"{where}: model config requires d_w and scheme")
    try:
        variant = SchemeVariant(data["scheme"])
    except ValueError:
        raise ConfigError(f"{where}: unknown scheme {data['scheme']!r}") from None
    scheme = EntityScheme(variant, data.get("el_threshold", -0.15))
    kwargs = {key: data[key] for key in data if key not in ("scheme", "el_threshold")}
    return ModelConfig(scheme=scheme, **kwargs)


def _train_setup(config_path: Path, args) -> tuple[Path, Path, Path, training.TrainConfig]:
    data = _read_json(config_path)
    _reject_unknown(data, _RUN_KEYS, str(config_path))
    for key in ("train_data", "val_data", "store", "model"):
        if key not in data:
            raise ConfigError(f"{config_path}: missing key {key!r}")
    base = config_path.parent
    paths = {key: (base / data[key]).resolve() for key in ("train_data", "val_data", "store")}
    for key, path in paths.items():
        if not path.exists():
            raise ConfigError(f"{config_path}: {key} path {path} does not exist")
    model_cfg = _model_config_from_json(data["model"], f"{config_path} model")
    train_kwargs = dict(data.get("training", {}))
    _reject_unknown(train_kwargs, _TRAINING_KEYS, f"{config_path} training")
    # command-line flags override config values
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    if args.epochs is not None:
        train_kwargs["epochs"] = args.epochs
    if args.batch_size is not None:
        train_kwargs["batch_size"] = args.batch_size
    if args.lr is not None:
        train_kwargs["learning_rate"] = args.lr
    cfg = training.TrainConfig(model=model_cfg, **train_kwargs)
    return paths["train_data"], paths["val_data"], paths["store"], cfg


def cmd_train(args) -> int:
    train_path, val_path, store_path, cfg = _train_setup(Path(args.config), args)
    train_set = corpus.load_dataset(train_path, max_len=cfg.max_len)
    val_set = corpus.load_dataset(val_path, max_len=cfg.max_len)
    with embeddings.open_store(store_path) as store:
        def report(epoch: int, tl: float, vl: float, va: float) -> None:
            print(f"epoch {epoch}/{cfg.epochs} train_loss={tl:.6f} "
                  f"val_loss={vl:.6f} val_acc={va:.4f}")

        ckpt, history = training.train(train_set, val_set, store, cfg, on_epoch=report)
    out = Path(args.out)
    training.save_checkpoint(ckpt, out)
    history_path = Path(args.history) if args.history else Path(str(out) + ".history.json")
    history_path.write_text(
        json.dumps(history.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    print(f"best epoch {ckpt.manifest['epoch']} "
          f"val_loss={ckpt.manifest['val_loss']:.6f} -> {out}")
    return 0


def cmd_predict(args) -> int:
    ckpt = training.load_checkpoint(args.model)
    config = ckpt.model_config
    max_len = ckpt.manifest["train"]["max_len"]
    dataset = corpus.load_dataset(args.data, max_len=max_len)
    records = []
    unlinked = 0
    with embeddings.open_store(args.store) as store:
        for inst in dataset.instances:
            if config.scheme.variant is SchemeVariant.NER_POPULARITY:
                unlinked += sum(
                    1 for tag, lp in zip(inst.ner_tags, inst.el_logprobs)
                    if tag != "O" and lp is None
                )
            we, et = instance_inputs(config, inst, store)
            cls, y, _trace = predict(ckpt.params, config, we, et)
            prob = float(y[1]) if config.C >= 2 else float(y[0])
            records.append(evaluation.PredictionRecord(
                id=inst.id, lang=inst.lang, pred=cls, prob=prob, gold=inst.label,
            ))
    if unlinked:
        print(f"warning: {unlinked} entity tokens without link probability "
              "treated as unpopular", file=sys.stderr)
    evaluation.write_predictions(records, args.out)
    print(f"wrote {len(records)} predictions -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    records = evaluation.load_predictions(args.preds)
    if not records:
        raise DataError(f"no prediction records in {args.preds}")
    report = evaluation.evaluate_predictions(records, support_weighted=args.support_weighted)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    header = f"{'lang':<8}{'support':>8}{'acc':>8}{'prec':>8}{'rec':>8}{'f1':>8}"
    print(header)
    for rep in report.languages:
        print(f"{rep.lang:<8}{rep.support:>8}{rep.accuracy:>8.4f}"
              f"{rep.precision:>8.4f}{rep.recall:>8.4f}{rep.f1:>8.4f}")
    print(f"{'overall':<8}{sum(r.support for r in report.languages):>8}"
          f"{report.accuracy:>8.4f}{report.precision:>8.4f}"
          f"{report.recall:>8.4f}{report.f1:>8.4f}")
    return 0


def _fmt_rate(rate: Optional[float]) -> str:
    return "n/a" if rate is None else f"{rate:.4f}"


def cmd_analyze_transfer(args) -> int:
    orig = evaluation.load_predictions(args.orig)
    synth = evaluation.load_predictions(args.synth)
    pairs = corpus.load_pairing(args.pairs)
    report = evaluation.transfer_rates(orig, synth, pairs)
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    print(f"{'lang':<8}{'pairs':>8}{'correct':>10}{'wrong':>10}")
    for lang, counts in sorted(report.per_language.items()):
        total = counts.correct_total + counts.wrong_total
        print(f"{lang:<8}{total:>8}{_fmt_rate(counts.correct_rate):>10}"
              f"{_fmt_rate(counts.wrong_rate):>10}")
    pooled = report.pooled
    total = pooled.correct_total + pooled.wrong_total
    print(f"{'pooled':<8}{total:>8}{_fmt_rate(pooled.correct_rate):>10}"
          f"{_fmt_rate(pooled.wrong_rate):>10}")
    return 0


def cmd_analyze_entropy(args) -> int:
    ckpt = training.load_checkpoint(args.model)
    config = ckpt.model_config
    dataset = corpus.load_dataset(args.data, max_len=ckpt.manifest["train"]["max_len"])
    with embeddings.open_store(args.store) as store:
        report = evaluation.attention_entropy(ckpt.params, config, dataset, store)
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    print(f"mean attention entropy (nats): {report.mean_entropy:.6f} "
          f"over {len(report.per_instance)} instances")
    return 0


def cmd_analyze_correlation(args) -> int:
    records = evaluation.load_predictions(args.preds)
    dataset = corpus.load_dataset(args.data)
    report = evaluation.confusion_feature_correlation(
        dataset, records, el_threshold=args.el_threshold
    )
    report.write_csv(args.out)
    print(f"{'indicator':<10}" + "".join(
        f"{name:>15}" for name, _ in evaluation.CORRELATION_FEATURES
    ))
    for indicator in evaluation.CONFUSION_INDICATORS:
        row = report.matrix[indicator]
        cells = "".join(
            f"{(f'{row[name]:.3f}' if row[name] is not None else 'n/a'):>15}"
            for name, _ in evaluation.CORRELATION_FEATURES
        )
        print(f"{indicator:<10}{cells}")
    return 0


def cmd_export_embeddings(args) -> int:
    ckpt = training.load_checkpoint(args.model)
    evaluation.export_entity_embeddings(ckpt, args.out)
    print(f"wrote entity-type embeddings -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    spec_path = Path(args.spec)
    data = _read_json(spec_path)
    _reject_unknown(data, _SPEC_KEYS, str(spec_path))
    for key in ("rule", "n_instances"):
        if key not in data:
            raise ConfigError(f"{spec_path}: missing key {key!r}")
    rule_data = dict(data["rule"])
    _reject_unknown(rule_data, {"kind", "tag", "threshold"}, f"{spec_path} rule")
    if "kind" not in rule_data:
        raise ConfigError(f"{spec_path}: rule requires a kind")
    rule = synthgen.LabelRule(**rule_data)
    kwargs = {}
    for key in ("n_instances", "vocab_size", "positive_rate", "seed", "embed_dim"):
        if key in data:
            kwargs[key] = data[key]
    if "languages" in data:
        kwargs["languages"] = tuple(data["languages"])
    if "length_range" in data:
        kwargs["length_range"] = tuple(data["length_range"])
    spec = synthgen.GenSpec(rule=rule, **kwargs)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset, entries = synthgen.generate(spec)
    corpus.save_dataset(dataset, out_dir / "corpus.jsonl")
    written = [out_dir / "corpus.jsonl"]

    splits = data.get("splits")
    if splits:
        _reject_unknown(dict(splits), {"train", "val", "test"}, f"{spec_path} splits")
        counts = [(name, splits[name]) for name in ("train", "val", "test") if name in splits]
        if sum(c for _, c in counts) > len(dataset):
            raise ConfigError(f"{spec_path}: split sizes exceed n_instances")
        start = 0
        for name, count in counts:
            part = dataset.instances[start:start + count]
            corpus.save_dataset(part, out_dir / f"{name}.jsonl")
            written.append(out_dir / f"{name}.jsonl")
            start += count

    pairing_cfg = data.get("pairing")
    if pairing_cfg:
        _reject_unknown(dict(pairing_cfg), {"n_langs", "seed"}, f"{spec_path} pairing")
        translated, table = synthgen.generate_pairing(
            dataset, pairing_cfg["n_langs"], pairing_cfg.get("seed", spec.seed)
        )
        corpus.save_dataset(translated, out_dir / "translations.jsonl")
        corpus.save_pairing(table, out_dir / "pairing.jsonl")
        entries = entries + synthgen.hash_entries(translated, spec.embed_dim, spec.seed)
        written += [out_dir / "translations.jsonl", out_dir / "pairing.jsonl"]

    store_path = out_dir / "embeddings.exeb"
    embeddings.write_store(entries, store_path)
    written += [store_path, embeddings.index_path_for(store_path)]
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_validate(args) -> int:
    dataset = corpus.load_dataset(args.data, max_len=args.max_len)
    message = f"ok: {len(dataset)} instances, {len(dataset.languages)} language(s)"
    if args.store:
        with embeddings.open_store(args.store) as store:
            for inst in dataset.instances:
                matrix = store.fetch(inst.id)
                if matrix.shape[0] < len(inst.tokens):
                    raise DataError(
                        f"instance {inst.id!r}: store has {matrix.shape[0]} rows "
                        f"for {len(inst.tokens)} tokens"
                    )
            message += f", store width {store.d_w}"
    print(message)
    return 0


def _thread_cap() -> Optional[int]:
    """Optional cap on internal parallelism; execution is currently sequential."""
    raw = os.environ.get("EXCLAIM_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"EXCLAIM_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"EXCLAIM_THREADS must be >= 1, got {cap}")
    return cap


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exclaim",
        description="Train and analyze entity-aware claim-detection models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", help="history JSON path (default: <out>.history.json)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write prediction records for a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="per-language weighted metrics from predictions")
    p.add_argument("--preds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--support-weighted", action="store_true", dest="support_weighted")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="transfer, entropy and correlation analyses")
    asub = p.add_subparsers(dest="analysis", required=True)

    q = asub.add_parser("transfer", help="cross-lingual prediction-consistency rates")
    q.add_argument("--orig", required=True)
    q.add_argument("--synth", required=True)
    q.add_argument("--pairs", required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_analyze_transfer)

    q = asub.add_parser("entropy", help="mean attention entropy over a dataset")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--store", required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_analyze_entropy)

    q = asub.add_parser("correlation", help="confusion-outcome vs feature correlations")
    q.add_argument("--preds", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--el-threshold", type=float, default=-0.15, dest="el_threshold")
    q.set_defaults(func=cmd_analyze_correlation)

    p = sub.add_parser("export-embeddings", help="dump the entity-type embedding table as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("generate", help="build a synthetic corpus from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("validate", help="check a corpus (and optional store) for conformance")
    p.add_argument("--data", required=True)
    p.add_argument("--store")
    p.add_argument("--max-len", type=int, default=128, dest="max_len")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _thread_cap()
        return args.func(args)
    except ConfigError as exc:
        return _fail(2, exc)
    except DataError as exc:
        return _fail(3, exc)
    except NumericalError as exc:
        return _fail(4, exc)
    except ExclaimError as exc:  # base-class fallback
        return _fail(3, exc)


def _fail(code: int, exc: Exception) -> int:
    message = " ".join(str(exc).split())
    print(f"error[{code}]: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
