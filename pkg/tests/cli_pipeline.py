"""Full command-line pipeline on the bundled 8-image fixture."""

import json
from pathlib import Path

from synthiqa.cli import main
from synthiqa.fixtures import bundled_fixture_dir
from synthiqa.imaging import load_image, save_image

CONFIG = """\
# small enough to run in a few seconds on one core
preset = desk
crop = 64
feature_dim = 16
t1_epochs = 2
t2_epochs = 1
"""


def run(cmd):
    code = main([str(c) for c in cmd])
    if code != 0:
        raise AssertionError(f"command failed with exit code {code}: {cmd}")


def run_pipeline(workdir, seed: int = 5, n_pairs: int = 120) -> dict:
    """Run every subcommand once; returns the paths of the produced artifacts."""
    w = Path(workdir)
    w.mkdir(parents=True, exist_ok=True)
    (w / "run.cfg").write_text(CONFIG, encoding="utf-8")
    cfg = ["--config", w / "run.cfg"]
    corpus = w / "corpus"
    run(["synthesize", "--pristine", bundled_fixture_dir(), "--per-image", 6, "--seed", seed, "--out", corpus, *cfg])
    manifest = corpus / "manifest.jsonl"
    run(["agents-score", "--manifest", manifest, "--out", w / "scores.json", *cfg])
    run(["make-pairs", "--manifest", manifest, "--n", n_pairs, "--seed", seed, "--scores", w / "scores.json",
         "--out", w / "pairs.jsonl", *cfg])

    # target domain: colour-cast copies of a few corpus images
    rows = [json.loads(line) for line in manifest.read_text().splitlines()]
    target = w / "target"
    for row in rows[::5]:
        img = load_image(corpus / row["distorted"])
        img[..., 0] *= 1.15
        img[..., 2] *= 0.8
        save_image(img, target / row["distorted"])

    # labels: a severity-derived score for every distorted image
    with open(w / "labels.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("path,mos\n")
        for row in rows:
            levels = [s["level"] for s in row["recipe"]]
            fh.write(f"corpus/{row['distorted']},{5.0 - sum(levels) / 4.0}\n")

    run(["train", "--pairs", w / "pairs.jsonl", "--seed", seed, "--out", w / "pre.ckpt", "--log", w / "pre.csv", *cfg])
    run(["adapt", "--ckpt", w / "pre.ckpt", "--pairs", w / "pairs.jsonl", "--target", target, "--out", w / "ada.ckpt",
         "--log", w / "ada.csv"])
    run(["eval", "--ckpt", w / "ada.ckpt", "--labels", w / "labels.csv", "--out", w / "report.json"])
    run(["gmad", "--pool", corpus, "--defender", w / "ada.ckpt", "--attacker", f"{w / 'scores.json'}#gmsd",
         "--tolerance", "0.5", "--out", w / "gmad"])
    return {
        "manifest": manifest,
        "scores": w / "scores.json",
        "pairs": w / "pairs.jsonl",
        "pretrain_ckpt": w / "pre.ckpt",
        "adapt_ckpt": w / "ada.ckpt",
        "report": w / "report.json",
        "gmad": w / "gmad" / "gmad.json",
    }
