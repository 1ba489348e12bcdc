"""Shared fixtures.

The heavyweight fixture is the default-config training run (seed 1, 200
images per class, 30 epochs).  It is built once per session, through the
command-line entry point so the CLI's own output files double as test
subjects, and every test that needs a realistically trained model loads
the same weights file instead of retraining.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from caselab import dataset, model  # noqa: E402

CONFIG_PATH = Path(__file__).parent / "acceptance_config.json"


@pytest.fixture(scope="session")
def acceptance_cfg():
    with open(CONFIG_PATH) as f:
        return json.load(f)


def run_cli(args, cwd=None):
    """Run the installed CLI in a subprocess; returns CompletedProcess."""
    return subprocess.run([sys.executable, "-m", "caselab", *args],
                         capture_output=True, text=True, cwd=cwd)


@pytest.fixture(scope="session")
def shipped_run(acceptance_cfg, tmp_path_factory):
    """Default-config training, run once through the CLI.

    Returns a dict with the weights path, the parsed final test accuracy,
    the wall-clock seconds the training command took, and the output dir.
    """
    out = tmp_path_factory.mktemp("shipped_run")
    t0 = time.time()
    proc = run_cli(["train",
                    "--seed", str(acceptance_cfg["seeds"][0]),
                    "--per-class", str(acceptance_cfg["per_class"]),
                    "--epochs", str(acceptance_cfg["epochs"]),
                    "--learning-rate", str(acceptance_cfg["learning_rate"]),
                    "--output-dir", str(out),
                    "--no-timestamp"])
    seconds = time.time() - t0
    assert proc.returncode == 0, proc.stderr
    test_acc = None
    for line in proc.stdout.splitlines():
        if line.startswith("test_acc "):
            test_acc = float(line.split()[1])
    assert test_acc is not None, f"no test_acc line in: {proc.stdout!r}"
    return {"weights": out / "weights.bin",
            "history": out / "history.csv",
            "out_dir": out,
            "test_acc": test_acc,
            "train_seconds": seconds}


@pytest.fixture(scope="session")
def shipped_bundle(shipped_run):
    return model.load_weights(shipped_run["weights"])


@pytest.fixture(scope="session")
def shipped_split(acceptance_cfg):
    images = dataset.generate(acceptance_cfg["seeds"][0], acceptance_cfg["per_class"])
    return dataset.split(images, tuple(acceptance_cfg["split_fractions"]),
                         acceptance_cfg["seeds"][0])


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A quick low-epoch CLI pipeline for exercising command plumbing."""
    out = tmp_path_factory.mktemp("small_run")
    proc = run_cli(["train", "--seed", "5", "--per-class", "24", "--epochs", "4",
                    "--output-dir", str(out), "--no-timestamp"])
    assert proc.returncode == 0, proc.stderr
    return {"weights": out / "weights.bin", "out_dir": out,
            "args": ["--seed", "5", "--per-class", "24", "--epochs", "4"]}
