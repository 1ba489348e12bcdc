"""``case-lab``: reproduce every experiment from the command line.

Exit codes: 0 success, 2 usage/config errors, 3 I/O and parse errors,
4 numerical failures (divergent training, degenerate statistical input).
A hypothesis test that fails to reject is a result, not an error.

All commands are config-driven: defaults, then ``key = value`` lines from
``--config``, then explicit flags, in increasing precedence.  Datasets are
regenerated from the seed on every run; only weights are read from disk.
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import dataset, diagnostics, model, saliency
from .errors import DegenerateSampleError, FileFormatError, NumericalError

SPLIT_FRACTIONS = (0.5, 0.25, 0.25)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 1
    per_class: int = 200
    epochs: int = 30
    learning_rate: float = 0.05
    k_contrast: int = 3
    beta: int = 4
    fraction: float = 0.05
    tau: float = 0.001
    epsilon: float = 1e-8
    methods: tuple = saliency.PUBLIC_METHODS
    attribution_layer: int = model.ATTRIBUTION_LAYER
    case_weighting: str = "pooled"
    ablation_fill: str = "mean"
    output_dir: str = "."
    threads: int = 1

    def validate(self):
        if self.case_weighting not in ("pooled", "elementwise"):
            raise UsageError(f"case_weighting must be pooled or elementwise, got {self.case_weighting!r}")
        if self.ablation_fill not in ("mean", "zero"):
            raise UsageError(f"ablation_fill must be mean or zero, got {self.ablation_fill!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise UsageError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.beta < 1:
            raise UsageError(f"beta must be a positive integer, got {self.beta}")
        if self.k_contrast < 1:
            raise UsageError(f"k_contrast must be >= 1, got {self.k_contrast}")
        allowed = saliency.PUBLIC_METHODS + saliency.STUB_METHODS
        for m in self.methods:
            if m not in allowed:
                raise UsageError(
                    f"unknown method {m!r}; valid methods: {', '.join(saliency.PUBLIC_METHODS)}")
        return self


_INT_KEYS = {"seed", "per_class", "epochs", "k_contrast", "beta",
             "attribution_layer", "threads"}
_FLOAT_KEYS = {"learning_rate", "fraction", "tau", "epsilon"}


def _parse_methods(text):
    names = tuple(m.strip() for m in text.split(",") if m.strip())
    return saliency.PUBLIC_METHODS if names == ("all",) else names


def parse_config_file(path):
    """``key = value`` lines; blank lines and # comments ignored."""
    values = {}
    known = {f.name for f in fields(RunConfig)}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise FileFormatError(f"cannot read config file {path}: {e.strerror}", 0)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key == "methods":
                values[key] = _parse_methods(value)
            else:
                values[key] = value
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}")
    return values


def load_config(args):
    cfg = RunConfig()
    if args.config:
        cfg = replace(cfg, **parse_config_file(args.config))
    overrides = {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            overrides[f.name] = _parse_methods(flag) if f.name == "methods" else flag
    return replace(cfg, **overrides).validate()


def _add_common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--k-contrast", dest="k_contrast", type=int)
    p.add_argument("--beta", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--methods", help="comma-separated method names, or 'all'")
    p.add_argument("--attribution-layer", dest="attribution_layer", type=int)
    p.add_argument("--case-weighting", dest="case_weighting",
                   choices=("pooled", "elementwise"))
    p.add_argument("--ablation-fill", dest="ablation_fill", choices=("mean", "zero"))
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--threads", type=int)
    p.add_argument("--no-timestamp", action="store_true",
                   help="omit timestamps so outputs are byte-reproducible")


def _timestamp(args):
    if args.no_timestamp:
        return None
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _out_dir(cfg):
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset_split(cfg):
    images = dataset.generate(cfg.seed, cfg.per_class)
    return dataset.split(images, SPLIT_FRACTIONS, cfg.seed)


def _load_model(cfg, weights_path):
    bundle = model.load_weights(weights_path, attribution_layer=cfg.attribution_layer)
    try:
        model.forward_with_capture(bundle, np.zeros(bundle.input_shape))
    except Exception:
        raise UsageError(
            f"attribution layer {cfg.attribution_layer} does not produce a rank-3 activation")
    return bundle


def _experiment_inputs(cfg, weights_path):
    split = _dataset_split(cfg)
    bundle = _load_model(cfg, weights_path)
    confusion = model.confusion_matrix(bundle, split.validation)
    return split, bundle, confusion


def _method_table(cfg, confusion):
    return {name: saliency.build_method(
                name, confusion=confusion, k_contrast=cfg.k_contrast, beta=cfg.beta,
                epsilon=cfg.epsilon, weighting=cfg.case_weighting)
            for name in cfg.methods}


def _fill_value(cfg, split):
    return dataset.mean_pixel(split.train) if cfg.ablation_fill == "mean" else 0.0


def cmd_gen_data(cfg, args):
    images = dataset.generate(cfg.seed, cfg.per_class)
    counts = {}
    for im in images:
        counts[im.label] = counts.get(im.label, 0) + 1
    for label in sorted(counts):
        print(f"{dataset.CLASS_NAMES[label]}: {counts[label]}")
    if args.export:
        dataset.save_container(images, args.export)
        print(f"wrote {len(images)} images to {args.export}")
    return 0


def cmd_train(cfg, args):
    split = _dataset_split(cfg)
    bundle, history = model.train(split, cfg.epochs, cfg.learning_rate, cfg.seed)
    out = _out_dir(cfg)
    weights_path = Path(args.weights_out) if args.weights_out else out / "weights.bin"
    model.save_weights(bundle, weights_path)
    history_path = Path(args.history_out) if args.history_out else out / "history.csv"
    diagnostics.write_csv(history_path, ("epoch", "loss", "train_acc", "val_acc"),
                          [(h.epoch, h.loss, h.train_acc, h.val_acc) for h in history],
                          _timestamp(args))
    test_x = np.stack([im.pixels for im in split.test])
    test_y = np.array([im.label for im in split.test])
    test_acc = float(np.mean(model.batch_logits(bundle, test_x).argmax(axis=1) == test_y))
    if history:
        print(f"final train_acc {history[-1].train_acc:.4f} val_acc {history[-1].val_acc:.4f}")
    print(f"test_acc {test_acc:.4f}")
    print(f"wrote {weights_path} and {history_path}")
    return 0


def _class_indices(bundle, pixels, class_spec):
    if class_spec in ("top1", "top2pair"):
        probs = model.predict(bundle, pixels)
        order = np.argsort(-probs, kind="stable")
        return [int(order[0])] if class_spec == "top1" else [int(order[0]), int(order[1])]
    try:
        cls = int(class_spec)
    except ValueError:
        raise UsageError(f"--class must be top1, top2pair, or an integer, got {class_spec!r}")
    if not 0 <= cls < bundle.class_count:
        raise UsageError(f"class {cls} out of range [0, {bundle.class_count})")
    return [cls]


def cmd_saliency(cfg, args):
    split, bundle, confusion = _experiment_inputs(cfg, args.weights)
    if not 0 <= args.image_index < len(split.test):
        raise UsageError(f"image index {args.image_index} out of range "
                         f"[0, {len(split.test)}) for the test split")
    pixels = split.test[args.image_index].pixels
    table = _method_table(cfg, confusion)
    out = _out_dir(cfg)
    for cls in _class_indices(bundle, pixels, args.class_spec):
        for name, fn in table.items():
            smap = fn(bundle, pixels, cls)
            stem = f"{name}_{args.image_index}_{cls}"
            saliency.write_pgm(smap, out / f"{stem}.pgm")
            saliency.write_map_csv(smap, out / f"{stem}.csv")
            print(f"wrote {out / stem}.pgm and .csv")
    return 0


def cmd_rq1(cfg, args):
    split, bundle, confusion = _experiment_inputs(cfg, args.weights)
    table = _method_table(cfg, confusion)
    out = _out_dir(cfg)
    ts = _timestamp(args)
    results = {}
    for name, fn in table.items():
        result = diagnostics.rq1_experiment(bundle, fn, split.test, cfg.fraction,
                                            threads=cfg.threads, method_name=name)
        results[name] = result
        diagnostics.write_rq1_samples_csv(out / f"rq1_{name}.csv", result, ts)
        diagnostics.write_agreement_hist_csv(out / f"agreement_hist_{name}.csv", result,
                                             timestamp=ts)
        median = float(np.median([s.agreement for s in result.samples]))
        print(f"{name}: n={result.test.n_effective} median_agreement={median:.4f} "
              f"W={result.test.statistic:.1f} p={result.test.p_value:.3e} "
              f"reject={result.test.reject_at_05}")
    diagnostics.write_rq1_summary_csv(out / "rq1_summary.csv", results, ts)
    diagnostics.write_json_report(out / "rq1_report.json",
                                  diagnostics.rq1_report_payload(results, cfg.fraction), ts)
    return 0


def cmd_rq2(cfg, args):
    split, bundle, confusion = _experiment_inputs(cfg, args.weights)
    methods = dict(_method_table(cfg, confusion))
    if "case" not in methods:
        methods["case"] = saliency.build_method(
            "case", confusion=confusion, k_contrast=cfg.k_contrast, beta=cfg.beta,
            epsilon=cfg.epsilon, weighting=cfg.case_weighting)
    fill = _fill_value(cfg, split)
    result = diagnostics.rq2_experiment(bundle, methods, split.test, cfg.fraction,
                                        fill, threads=cfg.threads)
    out = _out_dir(cfg)
    ts = _timestamp(args)
    diagnostics.write_rq2_drops_csv(out / "rq2_drops.csv", result, ts)
    diagnostics.write_rq2_summary_csv(out / "rq2_summary.csv", result, ts)
    diagnostics.write_json_report(out / "rq2_report.json",
                                  diagnostics.rq2_report_payload(result, cfg.fraction, fill), ts)
    for s in result.summaries:
        tail = "degenerate pairing (identical drops)" if s.degenerate else (
            "--" if s.p_case_greater is None else f"p_vs_case={s.p_case_greater:.3e}")
        print(f"{s.method}: n={s.n} mean_drop={s.mean_drop:.4f} sd={s.sd_drop:.4f} {tail}")
    return 0


def cmd_sparsity(cfg, args):
    split, bundle, _ = _experiment_inputs(cfg, args.weights)
    result = diagnostics.sparsity_experiment(bundle, split.test, cfg.tau,
                                             threads=cfg.threads)
    out = _out_dir(cfg)
    ts = _timestamp(args)
    diagnostics.write_sparsity_csv(out / "sparsity.csv", result, ts)
    diagnostics.write_sparsity_per_image_csv(out / "sparsity_per_image.csv", result, ts)
    counts = np.array([active for _, _, active in result.per_image], dtype=np.int64)
    hist_rows = [(v, int((counts == v).sum())) for v in range(33)]
    diagnostics.write_csv(out / "sparsity_hist.csv", ("active_channels", "image_count"),
                          hist_rows, ts)
    for label, mean in result.per_class_mean.items():
        print(f"{dataset.CLASS_NAMES[label]}: mean_active_channels={mean:.3f}")
    missing = sorted(set(range(bundle.class_count)) - set(result.per_class_mean))
    for label in missing:
        print(f"{dataset.CLASS_NAMES[label]}: no correctly predicted images")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="case-lab",
        description="contrastive saliency workbench: data, training, maps, diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shape dataset")
    _add_common(p)
    p.add_argument("--export", help="write a dataset container to this path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the shipped CNN")
    _add_common(p)
    p.add_argument("--weights-out", help="weights file path (default <output-dir>/weights.bin)")
    p.add_argument("--history-out", help="history CSV path (default <output-dir>/history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("saliency", help="export saliency maps for one test image")
    _add_common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--image-index", dest="image_index", type=int, default=0)
    p.add_argument("--class", dest="class_spec", default="top1",
                   help="top1, top2pair, or an explicit class index")
    p.set_defaults(func=cmd_saliency)

    for name, fn, blurb in (("rq1", cmd_rq1, "top-1 vs top-2 agreement diagnostic"),
                            ("rq2", cmd_rq2, "ablation fidelity diagnostic"),
                            ("sparsity", cmd_sparsity, "active-channel sparsity per class")):
        p = sub.add_parser(name, help=blurb)
        _add_common(p)
        p.add_argument("--weights", required=True)
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        return args.func(cfg, args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, DegenerateSampleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
