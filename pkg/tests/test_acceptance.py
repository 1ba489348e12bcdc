"""Eleven end-to-end checks of the package's headline guarantees.

Each test prints a single ``[PASS]``/``[FAIL]`` line (visible under
``pytest -s``).  The heavyweight fixtures are shared: the default-config
training run happens once and serves every criterion that needs it.
"""

import copy
import functools
import math
import time

import numpy as np
import pytest

from conftest import run_cli

from caselab import dataset, diagnostics, model, saliency, stats
from caselab.errors import FileFormatError

# results cached across criteria so the three-seed study does not retrain
# or rescore what the single-seed criteria already measured
_cache = {}


def criterion(num, blurb):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except Exception:
                print(f"\n[FAIL] criterion {num}: {blurb}", flush=True)
                raise
            print(f"\n[PASS] criterion {num}: {blurb}", flush=True)
        return run
    return wrap


def _median_agreement(result):
    return float(np.median([s.agreement for s in result.samples]))


def _min_p_all_below(n):
    """Smallest reachable p for n identical below-threshold agreements.

    Mirrors the statistic's two routes from first principles: exact sign
    enumeration gives 2^-n; the large-n route is the tie-corrected normal
    tail at W+ = 0 for one tie group of size n, continuity 0.5.
    """
    if n <= 20:
        return 0.5 ** n
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (n ** 3 - n) / 48.0
    z = (0.5 - mu) / math.sqrt(var)
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


@criterion(1, "activation gradients match central finite differences")
def test_criterion_01_gradient_fd():
    t0 = time.perf_counter()
    bundle = model.build_model(seed=0)
    rng = np.random.default_rng(42)
    step = 1e-6
    worst = 0.0
    for _ in range(10):
        pixels = rng.random((1, 32, 32))
        _, activation = model.forward_with_capture(bundle, pixels)
        flat = activation.ravel()
        for u in range(8):
            grad = model.grad_wrt_activation(bundle, pixels, u).ravel()
            for e in rng.choice(flat.size, 64, replace=False):
                bumped = flat.copy()
                bumped[e] += step
                s_hi = model.head_forward(bundle, bumped.reshape(activation.shape))[u]
                bumped[e] -= 2 * step
                s_lo = model.head_forward(bundle, bumped.reshape(activation.shape))[u]
                fd = (s_hi - s_lo) / (2 * step)
                err = abs(grad[e] - fd) / max(1.0, abs(grad[e]), abs(fd))
                worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-5, f"worst relative error {worst:.3e}"
    assert elapsed < 30.0, f"took {elapsed:.1f}s"


@criterion(2, "projection is orthogonal, cancels parallel input, ignores contrast scale")
def test_criterion_02_projection_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    eps = 1e-12
    for _ in range(1000):
        gamma_u = rng.standard_normal((32, 8, 8))
        gamma_bar = rng.standard_normal((32, 8, 8))
        p1 = saliency.orthogonal_projection(gamma_u, gamma_bar, epsilon=eps)
        dot = abs(float((p1 * gamma_bar).sum()))
        assert dot <= 1e-9 * (np.linalg.norm(gamma_u) * np.linalg.norm(gamma_bar) + 1)
        alpha = rng.standard_normal()
        parallel = saliency.orthogonal_projection(alpha * gamma_bar, gamma_bar,
                                                  epsilon=eps)
        assert np.linalg.norm(parallel) <= 1e-9 * abs(alpha) * np.linalg.norm(gamma_bar)
        for c in (1e-3, 1.0, 1e3):
            pc = saliency.orthogonal_projection(gamma_u, c * gamma_bar, epsilon=eps)
            assert np.linalg.norm(pc - p1) <= 1e-9 * np.linalg.norm(p1)
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"took {elapsed:.1f}s"


@criterion(3, "zero-contrast head reduces the contrastive map to the plain one bitwise")
def test_criterion_03_reduction_identity():
    bundle = copy.deepcopy(model.build_model(seed=3))
    target = 5
    contrast_classes = (0, 1, 2)
    confusion = np.zeros((8, 8), dtype=np.int64)
    for rank, v in enumerate(contrast_classes):
        confusion[target, v] = 3 - rank
    dense = f"layer{len(bundle.layer_specs) - 1}.weight"
    for v in contrast_classes:
        bundle.weights[dense][v, :] = 0.0
    rng = np.random.default_rng(7)
    for _ in range(20):
        pixels = rng.random((1, 32, 32))
        case_map = saliency.case_saliency(bundle, pixels, target, confusion,
                                          k_contrast=3, beta=4)
        plain_map = saliency.grad_cam(bundle, pixels, target, beta=4)
        assert np.array_equal(case_map.values, plain_map.values)


@criterion(4, "signed-rank p-values: exact small-n table, normal approximation close")
def test_criterion_04_wilcoxon_oracle():
    for n, expected in ((3, 1 / 8), (4, 1 / 16), (5, 1 / 32)):
        samples = [0.1 + 0.05 * i for i in range(n)]  # all below 0.5
        res = stats.wilcoxon_one_sided_less(samples, threshold=0.5, mode="exact")
        assert res.p_value == expected, f"n={n}: {res.p_value} != {expected}"
    for n in range(15, 26):
        rng = np.random.default_rng(n)
        samples = rng.uniform(0.2, 0.8, n)
        diffs = samples - 0.5
        assert np.unique(np.abs(diffs)).size == n and np.all(diffs != 0)
        exact = stats.wilcoxon_one_sided_less(samples, mode="exact").p_value
        normal = stats.wilcoxon_one_sided_less(samples, mode="normal").p_value
        assert abs(exact - normal) <= 0.01, f"n={n}: |{exact} - {normal}| > 0.01"


@criterion(5, "paired-t p-value matches the integrated t-density oracle")
def test_criterion_05_t_oracle():
    res = stats.paired_t_one_sided_greater([1.0, 2.0, 3.0, 4.0, 5.0],
                                           [0.0] * 5)
    assert abs(res.p_value - 0.00662) <= 0.0005
    # oracle: tail mass of the 4-dof t density, trapezoid on a fine grid,
    # with the normalizing constant written out by hand
    t_stat = 3.0 / (math.sqrt(2.5) / math.sqrt(5.0))
    coef = math.gamma(2.5) / (math.sqrt(4.0 * math.pi) * math.gamma(2.0))
    x = np.linspace(t_stat, 400.0, 4_000_001)
    tail = np.trapezoid(coef * (1.0 + x * x / 4.0) ** -2.5, x)
    assert abs(res.p_value - tail) <= 1e-6


@criterion(6, "contrastive maps separate confusable classes where plain maps do not")
def test_criterion_06_rq1_shipped(acceptance_cfg, shipped_run, shipped_bundle,
                                  shipped_split):
    cfg = acceptance_cfg
    confusion = model.confusion_matrix(shipped_bundle, shipped_split.validation)
    t0 = time.perf_counter()
    results = {}
    for name in ("case", "gradcam", "_constant", "_disjoint"):
        fn = saliency.build_method(name, confusion=confusion,
                                   k_contrast=cfg["k_contrast"], beta=cfg["beta"])
        results[name] = diagnostics.rq1_experiment(
            shipped_bundle, fn, shipped_split.test, cfg["fraction"], threads=1)
    t_rq1 = time.perf_counter() - t0

    case_median = _median_agreement(results["case"])
    plain_median = _median_agreement(results["gradcam"])
    _cache["seed1"] = (case_median, plain_median)
    _cache["t_seed1"] = shipped_run["train_seconds"] + t_rq1

    assert case_median < plain_median, f"{case_median} !< {plain_median}"
    assert results["case"].test.p_value < 0.05
    assert results["_constant"].test.p_value == 1.0
    n = results["_disjoint"].test.n_effective
    assert results["_disjoint"].test.p_value == pytest.approx(
        _min_p_all_below(n), rel=1e-12)
    total = shipped_run["train_seconds"] + t_rq1
    assert total < 300.0, f"training + scoring took {total:.0f}s"


@criterion(7, "masking contrastive-salient pixels hurts confidence more than random")
def test_criterion_07_rq2_shipped(acceptance_cfg, shipped_run, shipped_bundle,
                                  shipped_split):
    cfg = acceptance_cfg
    confusion = model.confusion_matrix(shipped_bundle, shipped_split.validation)
    fill = dataset.mean_pixel(shipped_split.train)
    t0 = time.perf_counter()
    methods = {name: saliency.build_method(name, confusion=confusion,
                                           k_contrast=cfg["k_contrast"],
                                           beta=cfg["beta"])
               for name in ("case", "_random")}
    result = diagnostics.rq2_experiment(shipped_bundle, methods,
                                        shipped_split.test, cfg["fraction"], fill)
    t_rq2 = time.perf_counter() - t0
    rows = {s.method: s for s in result.summaries}
    assert rows["case"].mean_drop > rows["_random"].mean_drop
    assert rows["_random"].p_case_greater < 0.05
    total = shipped_run["train_seconds"] + t_rq2
    assert total < 300.0, f"training + scoring took {total:.0f}s"


@criterion(8, "per-class active-channel means stay in range and re-aggregate exactly")
def test_criterion_08_sparsity(acceptance_cfg, shipped_bundle, shipped_split,
                               tmp_path):
    result = diagnostics.sparsity_experiment(shipped_bundle, shipped_split.test,
                                             tau=acceptance_cfg["tau"])
    assert result.per_class_mean, "no class produced correct predictions"
    for label, mean in result.per_class_mean.items():
        assert 0.0 <= mean <= 32.0, f"class {label}: {mean}"
    summary = tmp_path / "summary.csv"
    per_image = tmp_path / "per_image.csv"
    diagnostics.write_sparsity_csv(summary, result)
    diagnostics.write_sparsity_per_image_csv(per_image, result)
    regrouped = {}
    for line in per_image.read_text().splitlines()[1:]:
        _, label, active = line.split(",")
        regrouped.setdefault(int(label), []).append(int(active))
    rebuilt = [f"{label},{diagnostics._fmt(float(np.mean(counts)))}"
               for label, counts in sorted(regrouped.items())]
    assert summary.read_text().splitlines()[1:] == rebuilt


@criterion(9, "contrastive median agreement stays below the plain median on 3 seeds")
def test_criterion_09_three_seeds(acceptance_cfg, shipped_run, shipped_bundle,
                                  shipped_split):
    cfg = acceptance_cfg
    fractions = tuple(cfg["split_fractions"])
    medians = {}
    total = 0.0
    if "seed1" in _cache:
        medians[cfg["seeds"][0]] = _cache["seed1"]
        total += _cache["t_seed1"]
    for seed in cfg["seeds"]:
        if seed in medians:
            continue
        t0 = time.perf_counter()
        if seed == cfg["seeds"][0]:
            bundle, split = shipped_bundle, shipped_split
            total += shipped_run["train_seconds"]
        else:
            images = dataset.generate(seed, cfg["per_class"])
            split = dataset.split(images, fractions, seed)
            bundle, _ = model.train(split, cfg["epochs"], cfg["learning_rate"], seed)
        confusion = model.confusion_matrix(bundle, split.validation)
        pair = {}
        for name in ("case", "gradcam"):
            fn = saliency.build_method(name, confusion=confusion,
                                       k_contrast=cfg["k_contrast"], beta=cfg["beta"])
            pair[name] = _median_agreement(diagnostics.rq1_experiment(
                bundle, fn, split.test, cfg["fraction"], threads=1))
        medians[seed] = (pair["case"], pair["gradcam"])
        total += time.perf_counter() - t0
    for seed, (case_median, plain_median) in medians.items():
        assert case_median < plain_median, \
            f"seed {seed}: {case_median} !< {plain_median}"
    assert total < 900.0, f"three-seed study took {total:.0f}s"


@criterion(10, "every command rerun with the same config is byte-identical")
def test_criterion_10_determinism(tmp_path):
    base = ["--seed", "5", "--per-class", "16", "--epochs", "2"]

    def twice(command_args):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{command_args[0]}_{tag}"
            out.mkdir()
            proc = run_cli([*command_args, *base, "--output-dir", str(out),
                            "--no-timestamp"])
            assert proc.returncode == 0, proc.stderr
            outs.append(out)
        names = sorted(p.name for p in outs[0].iterdir())
        assert names == sorted(p.name for p in outs[1].iterdir()) and names
        for name in names:
            a, b = (outs[0] / name).read_bytes(), (outs[1] / name).read_bytes()
            assert a == b, f"{command_args[0]}: {name} differs between reruns"
        return outs[0]

    first = twice(["train"])
    weights = str(first / "weights.bin")
    twice(["saliency", "--weights", weights, "--class", "top2pair"])
    twice(["rq1", "--weights", weights, "--methods", "gradcam,case"])
    twice(["rq2", "--weights", weights, "--methods", "case"])
    twice(["sparsity", "--weights", weights])
    exports = []
    for tag in ("a", "b"):
        path = tmp_path / f"export_{tag}.bin"
        proc = run_cli(["gen-data", *base, "--export", str(path)])
        assert proc.returncode == 0, proc.stderr
        exports.append(path.read_bytes())
    assert exports[0] == exports[1]


@criterion(11, "weights and dataset files round-trip bit-exact and fail loudly when damaged")
def test_criterion_11_round_trips(tmp_path):
    bundle = model.build_model(seed=4)
    w1, w2 = tmp_path / "w1.bin", tmp_path / "w2.bin"
    model.save_weights(bundle, w1)
    model.save_weights(model.load_weights(w1), w2)
    assert w1.read_bytes() == w2.read_bytes()

    images = dataset.generate(seed=5, per_class=4)
    c1, c2 = tmp_path / "c1.bin", tmp_path / "c2.bin"
    dataset.save_container(images, c1)
    loaded = dataset.load_container(c1)
    assert len(loaded) == len(images)
    for a, b in zip(images, loaded):
        assert a.label == b.label and np.array_equal(a.pixels, b.pixels)
    dataset.save_container(loaded, c2)
    assert c1.read_bytes() == c2.read_bytes()

    for source, loader in ((w1, model.load_weights),
                           (c1, dataset.load_container)):
        data = source.read_bytes()
        bad_magic = tmp_path / f"magic_{source.name}"
        bad_magic.write_bytes(b"ZZZZ" + data[4:])
        with pytest.raises(FileFormatError):
            loader(bad_magic)
        cut = tmp_path / f"cut_{source.name}"
        cut.write_bytes(data[:len(data) // 2])
        with pytest.raises(FileFormatError):
            loader(cut)

    proc = run_cli(["sparsity", "--weights", str(tmp_path / "magic_w1.bin"),
                    "--seed", "5", "--per-class", "8",
                    "--output-dir", str(tmp_path)])
    assert proc.returncode == 3 and "error:" in proc.stderr
