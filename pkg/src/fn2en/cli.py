"""``fn2en`` command line: synthetic data, two-stage training, evaluation and layer analysis.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 partial success.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from .analysis import (collect_responses, compare_networks, entropy_report, evaluate, format_les_table, kfold_mean,
                       visualize_neuron)
from .checkpoint import load_network, load_teacher, save_network
from .config import ExperimentConfig
from .data import AugmentPolicy, load_dataset, make_folds, synth_toy_dataset, write_dataset, write_fnim
from .errors import ConfigError, ContractError, FN2ENError
from .nn import attach_head, build_expnet
from .toy import train_toy_teacher
from .trainer import check_stage1_shapes, load_training, save_training, train_stage1, train_stage2

log = logging.getLogger("fn2en")

METRICS_HEADER = ("run", "stage", "epoch", "lr", "loss", "accuracy", "seconds")
EXIT_PARTIAL = 5


# -- shared plumbing -------------------------------------------------------------
def _config(args):
    overrides = {"seed": args.seed, "out": args.out, "fold": args.fold}
    if args.config is None:
        return ExperimentConfig(source="<defaults>").with_overrides(overrides)
    return ExperimentConfig.load(args.config, overrides)


def _dataset(cfg):
    return load_dataset(cfg.require_path("dataset"))


def _split(cfg, dataset):
    """Train and held-out indices for the configured fold (everything trains when unset)."""
    fold = cfg["fold"]
    if fold is None:
        return np.arange(len(dataset)), None
    folds = make_folds(dataset, cfg["folds"])
    if not 0 <= fold < folds.k:
        raise ConfigError(f"fold {fold} outside [0, {folds.k})")
    return folds.train_indices(fold), folds.test_indices(fold)


def _out_dir(cfg):
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(value):
    return "" if value is None else repr(float(value))


def write_metrics(path, run, history, timing=False):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in history:
            w.writerow([run, row["stage"], row["epoch"], _fmt(row["lr"]), _fmt(row["loss"]),
                        _fmt(row.get("accuracy")), _fmt(row.get("seconds")) if timing else ""])


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _strip_timing(state, timing):
    if not timing:
        state.history = [{k: v for k, v in row.items() if k != "seconds"} for row in state.history]


def _log_epoch(row):
    acc = f" acc={row['accuracy']:.4f}" if "accuracy" in row else ""
    log.info("stage %d epoch %d lr=%g loss=%.6g%s", row["stage"], row["epoch"], row["lr"], row["loss"], acc)


def _resume(path, cfg, stage):
    net, state, prov = load_training(path)
    if prov.get("config_hash") != cfg.config_hash():
        raise ConfigError(f"{path} was produced under a different configuration; refusing to resume")
    if state.stage != stage:
        raise ConfigError(f"{path} holds a stage-{state.stage} run, not stage {stage}")
    return net, state, prov


def _teacher_shape(cfg, spec):
    """Tap shape of the configured teacher at the student's input size, or ``None`` without a teacher."""
    if cfg["teacher"] is None:
        return None, None
    teacher = load_teacher(cfg.require_path("teacher"))
    shape = teacher.tap_shape(cfg["teacher.tap"], (spec.in_channels, spec.input_size, spec.input_size))
    return teacher, shape


def _provenance(cfg, stage, state, **extra):
    return dict(stage=stage, epoch=state.epoch, seed=cfg["seed"], fold=cfg["fold"], config_hash=cfg.config_hash(),
                run=cfg["run"], **extra)


# -- commands ----------------------------------------------------------------------
def cmd_synth_data(args):
    cfg = _config(args)
    ds = synth_toy_dataset(num_classes=cfg["synth.numClasses"], per_class=cfg["synth.perClass"],
                           image_size=cfg["synth.imageSize"], subject_count=cfg["synth.subjects"], seed=cfg["seed"],
                           channels=cfg["synth.channels"], noise=cfg["synth.noise"])
    path = write_dataset(ds, _out_dir(cfg))
    print(f"wrote {path}: {ds.summary()}")
    return 0


def cmd_train_teacher(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    train, _ = _split(cfg, ds)
    policy = cfg.policy(ds.image_shape)
    result = train_toy_teacher(ds, seed=cfg["seed"], indices=train,
                               identity_epochs=cfg["teacherTrain.identityEpochs"],
                               finetune_epochs=cfg["teacherTrain.finetuneEpochs"], lr=cfg["teacherTrain.lr"],
                               finetune_lr=cfg["teacherTrain.finetuneLr"], batch_size=cfg["teacherTrain.batchSize"],
                               policy=policy)
    out = _out_dir(cfg)
    prov = dict(role="teacher", seed=cfg["seed"], fold=cfg["fold"])
    save_network(result.pretrained, out / "teacher_pretrained.fn2e", dict(prov, phase="identity"))
    save_network(result.finetuned, out / "teacher.fn2e", dict(prov, phase="fine-tuned"))
    print(f"identity loss {result.identity_history[-1]['loss']:.4f}, "
          f"fine-tune loss {result.finetune_history[-1]['loss']:.4f}; wrote {out / 'teacher.fn2e'}")
    return 0


def cmd_train_stage1(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    spec = cfg.spec(ds.num_classes)
    policy = cfg.policy(ds.image_shape)
    teacher, shape = _teacher_shape(cfg, spec)
    if teacher is None:
        raise ConfigError(f"{cfg.source}: 'teacher' must be set for stage 1")
    tap = cfg["teacher.tap"]
    schedule = cfg.schedule(1)
    if args.resume:
        student, state, _ = _resume(args.resume, cfg, 1)
    else:
        student, state = build_expnet(spec, np.random.default_rng([cfg["seed"], 1]), teacher_shape=shape), None
    check_stage1_shapes(student, teacher, tap)
    train, _ = _split(cfg, ds)
    out = _out_dir(cfg)
    result = train_stage1(student, teacher, ds, schedule, cfg.loss(), tap=tap, policy=policy, indices=train,
                          state=state, until_epoch=args.stop_after, on_epoch=_log_epoch)
    if not teacher.verify_frozen():
        raise ContractError("teacher parameters changed during stage 1")
    _strip_timing(result.state, args.timing)
    save_training(out / "stage1.fn2e", result.network, result.state, _provenance(cfg, 1, result.state, tap=tap))
    write_metrics(out / "stage1_metrics.csv", cfg["run"], result.history, args.timing)
    if result.history:
        first, last = result.history[0]["loss"], result.history[-1]["loss"]
        print(f"stage 1: loss {first:.6g} -> {last:.6g} over {len(result.history)} epochs")
    return 0


def cmd_train_stage2(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    spec = cfg.spec(ds.num_classes)
    policy = cfg.policy(ds.image_shape)
    schedule = cfg.schedule(2)
    state = None
    mode = "scratch" if args.scratch else "fn2en"
    if args.resume:
        net, state, prov = _resume(args.resume, cfg, 2)
        mode = prov.get("mode", mode)
    else:
        _, shape = _teacher_shape(cfg, spec)
        expected = build_expnet(spec, np.random.default_rng([cfg["seed"], 1]), teacher_shape=shape)
        if args.scratch:
            trunk = expected
        else:
            if args.checkpoint is None:
                raise ConfigError("train-stage2 needs --checkpoint <stage-1 checkpoint> (or --scratch)")
            trunk, _, _ = load_network(args.checkpoint)
            if trunk.has_head:
                raise ConfigError(f"{args.checkpoint} already has a classification head")
            if trunk.architecture_hash() != expected.architecture_hash():
                raise ConfigError(f"{args.checkpoint} does not match the configured architecture; refusing to continue")
        net = attach_head(trunk, spec, np.random.default_rng([cfg["seed"], 2]))
    train, held_out = _split(cfg, ds)
    out = _out_dir(cfg)
    result = train_stage2(net, ds, schedule, train_indices=train, eval_indices=held_out, policy=policy, state=state,
                          until_epoch=args.stop_after, on_epoch=_log_epoch)
    _strip_timing(result.state, args.timing)
    suffix = "_scratch" if mode == "scratch" else ""
    save_training(out / f"stage2{suffix}.fn2e", result.network, result.state,
                  _provenance(cfg, 2, result.state, mode=mode))
    write_metrics(out / f"stage2{suffix}_metrics.csv", cfg["run"], result.history, args.timing)
    if result.history and "accuracy" in result.history[-1]:
        print(f"stage 2 ({mode}): held-out accuracy {result.history[-1]['accuracy']:.4f}")
    return 0


def cmd_evaluate(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    if args.checkpoint is None:
        raise ConfigError("evaluate needs --checkpoint (use '{fold}' to evaluate one checkpoint per fold)")
    results = []
    if "{fold}" in args.checkpoint:
        folds = make_folds(ds, cfg["folds"])
        wanted = [cfg["fold"]] if cfg["fold"] is not None else range(folds.k)
        for f in wanted:
            if not 0 <= f < folds.k:
                raise ConfigError(f"fold {f} outside [0, {folds.k})")
            net, _, _ = load_network(args.checkpoint.format(fold=f))
            results.append((str(f), evaluate(net, ds, folds.test_indices(f), _eval_policy(ds, net))))
    else:
        net, _, _ = load_network(args.checkpoint)
        _, held_out = _split(cfg, ds)
        name = "all" if held_out is None else str(cfg["fold"])
        results.append((name, evaluate(net, ds, held_out, _eval_policy(ds, net))))
    out = _out_dir(cfg)
    mean = kfold_mean(r.accuracy for _, r in results)
    with open(out / "accuracy.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "accuracy", "count"])
        for name, r in results:
            w.writerow([name, repr(r.accuracy), r.confusion.total])
        w.writerow(["mean", repr(mean), sum(r.confusion.total for _, r in results)])
    total = results[0][1].confusion
    for _, r in results[1:]:
        total = total + r.confusion
    (out / "confusion.csv").write_text(total.to_csv(), encoding="utf-8")
    (out / "confusion_normalized.csv").write_text(total.to_csv(normalized=True), encoding="utf-8")
    print(f"mean accuracy {mean:.4f} over {len(results)} fold(s)")
    return 0


def _eval_policy(ds, net):
    return AugmentPolicy(canonical_size=ds.image_shape[-1], crop_size=net.input_shape[-1])


def _default_layers(net):
    return [layer["name"] for layer in net.layers if layer["kind"] == "maxpool"]


def cmd_analyze(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    if args.checkpoint is None:
        raise ConfigError("analyze needs --checkpoint")
    net_a, _, _ = load_network(args.checkpoint)
    net_b = load_network(args.compare)[0] if args.compare else None
    layers = list(cfg["analysis.layers"]) or _default_layers(net_a)
    if not layers:
        raise ConfigError("no layers to analyse; set analysis.layers")
    k, bins, tags = cfg["analysis.topK"], cfg["analysis.bins"], cfg["analysis.tags"]
    labels = ds.labels
    policy = _eval_policy(ds, net_a)
    if net_b is not None:
        if len(tags) != 2:
            raise ConfigError("analysis.tags needs two names when comparing")
        comparison = compare_networks(net_a, net_b, ds.inputs(), labels, layers, k, ds.num_classes, bins, policy,
                                      tags=tags)
        reports = [comparison.base, comparison.other]
    else:
        responses = collect_responses(net_a, ds.inputs(), layers, policy)
        reports = [entropy_report(responses, labels, k, ds.num_classes, tags[0], bins, ids=ds.ids)]
    out = _out_dir(cfg)
    with open(out / "neurons.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["network", "layer", "index", "entropy", "top1_label"])
        for report in reports:
            for layer in layers:
                for rec in report.records(layer):
                    w.writerow([report.tag, layer, rec.index, repr(rec.entropy), ds.class_names[rec.dominant_label]])
    with open(out / "entropy_hist.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["network", "layer", "bin_lo", "bin_hi", "count"])
        for report in reports:
            edges = report.bin_edges
            for layer in layers:
                for i, count in enumerate(report.entropy_histograms[layer]):
                    w.writerow([report.tag, layer, repr(float(edges[i])), repr(float(edges[i + 1])), int(count)])
    table = format_les_table(*reports)
    (out / "les_table.csv").write_text(table, encoding="utf-8")
    for report in reports:
        print(f"{report.tag}: LES threshold {report.threshold:.4f} nats, counts {report.les}")
    return 0


def _neuron_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--neurons must be a comma-separated list of integers: {text!r}") from exc


def cmd_visualize(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    if args.checkpoint is None:
        raise ConfigError("visualize needs --checkpoint")
    net, _, _ = load_network(args.checkpoint)
    neurons = _neuron_list(args.neurons)
    k = args.top_k or cfg["analysis.topK"]
    if k < 1:
        raise ConfigError(f"top-K must be >= 1, got {k}")
    responses = collect_responses(net, ds.inputs(), [args.layer], _eval_policy(ds, net))[args.layer]
    width = responses.shape[1]
    valid = [n for n in neurons if 0 <= n < width]
    skipped = [n for n in neurons if not 0 <= n < width]
    if not valid:
        raise ConfigError(f"no requested neuron lies in [0, {width}) for layer {args.layer}: {skipped}")
    out = _out_dir(cfg)
    rows = []
    for n in valid:
        mean, order = visualize_neuron(ds.images, responses[:, n], k, ids=ds.ids)
        write_fnim(out / f"{args.layer}_n{n:04d}.fnim", mean)
        rows += [(args.layer, n, rank, int(ds.ids[i]), repr(float(responses[i, n]))) for rank, i in enumerate(order)]
    with open(out / f"{args.layer}_topk.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "neuron", "rank", "image_id", "response"])
        w.writerows(rows)
    print(f"wrote {len(valid)} mean image(s) for layer {args.layer}")
    if skipped:
        print(f"skipped out-of-range neuron(s) {skipped}; layer {args.layer} has {width}", file=sys.stderr)
        return EXIT_PARTIAL
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-teacher": cmd_train_teacher,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "visualize": cmd_visualize,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fn2en", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help, config_required=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=config_required, help="key = value experiment file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--checkpoint")
        sp.add_argument("--fold", type=int, help="held-out fold index")
        return sp

    command("synth-data", "write the synthetic toy dataset", config_required=False)
    command("train-teacher", "train the toy teacher (identity, then expression fine-tune)")
    for name, help in (("train-stage1", "regress the student trunk onto teacher features"),
                       ("train-stage2", "train trunk and head with cross-entropy")):
        sp = command(name, help)
        sp.add_argument("--resume", help="continue a run from its checkpoint")
        sp.add_argument("--stop-after", type=int, help="stop once this many epochs are complete")
        sp.add_argument("--timing", action="store_true", help="fill the seconds column (breaks byte-identity)")
        if name == "train-stage2":
            sp.add_argument("--scratch", action="store_true", help="skip stage 1: random-initialised trunk baseline")
    command("evaluate", "accuracy and confusion matrices")
    sp = command("analyze", "neuron entropy histograms and low-expressive-score counts")
    sp.add_argument("--compare", help="second checkpoint; emits base counts plus deltas")
    sp = command("visualize", "mean of the top-K images per neuron")
    sp.add_argument("--layer", required=True)
    sp.add_argument("--neurons", required=True, help="comma-separated neuron indices")
    sp.add_argument("--top-k", type=int)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except FN2ENError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
