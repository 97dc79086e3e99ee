"""CSV/JSON/PNG emission for analysis results and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

from .analysis import AttentionStats, SimilarityMatrix

MANIFEST_NAME = "manifest.json"


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Enumerates every file a run writes under ``root``."""

    def __init__(self, root: str | os.PathLike, metadata: dict | None = None):
        self.root = Path(root)
        self.metadata = dict(metadata or {})
        self.entries: dict[str, str] = {}

    def add(self, path: str | os.PathLike, kind: str) -> Path:
        path = Path(path)
        rel = path.resolve().relative_to(self.root.resolve()).as_posix()
        self.entries[rel] = kind
        return path

    def extend(self, other: "Manifest", prefix: str = "") -> None:
        for rel, kind in other.entries.items():
            self.entries[f"{prefix}{rel}"] = kind

    @property
    def artifacts(self) -> list[dict]:
        return [
            {"path": rel, "kind": kind, "sha256": sha256_file(self.root / rel)}
            for rel, kind in sorted(self.entries.items())
        ]

    def write(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / MANIFEST_NAME
        body = {"metadata": self.metadata, "artifacts": self.artifacts}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path


def write_csv(path: str | os.PathLike, rows: Sequence[dict], columns: Sequence[str] | None = None) -> Path:
    """Plain CSV with floats written at full precision so reruns compare exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return path


def write_json(path: str | os.PathLike, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> Path:
    # no timestamps or version strings, so identical inputs give identical bytes
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _pyplot().close(fig)
    return path


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in text)


def plot_similarity(sim: SimilarityMatrix, path: str | os.PathLike) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(sim.values.numpy(), origin="lower", vmin=0, vmax=1, cmap="magma")
    ax.set_xlabel(f"{sim.model_b} layer")
    ax.set_ylabel(f"{sim.model_a} layer")
    ax.set_title("CKA")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_attention_boxes(stats: Sequence[AttentionStats], metric: str, path: str | os.PathLike) -> Path:
    """One box per layer and model, spread over heads."""
    plt = _pyplot()
    n_layers = max(s.num_layers for s in stats)
    fig, ax = plt.subplots(figsize=(max(5, 0.6 * n_layers * len(stats)), 3.6))
    width = 0.8 / len(stats)
    for m, s in enumerate(stats):
        values = getattr(s, metric).numpy()
        pos = [k + 1 + (m - (len(stats) - 1) / 2) * width for k in range(s.num_layers)]
        bp = ax.boxplot([values[k] for k in range(s.num_layers)], positions=pos, widths=width * 0.9, patch_artist=True)
        color = plt.cm.tab10(m % 10)
        for box in bp["boxes"]:
            box.set_facecolor(color)
        ax.plot([], [], color=color, lw=6, label=s.model)
    ax.set_xticks(range(1, n_layers + 1))
    ax.set_xlabel("layer")
    ax.set_ylabel("distance (patches)" if metric == "distance" else "entropy (nats)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))


def emit_report(
    out_dir: str | os.PathLike,
    similarities: Iterable[SimilarityMatrix] | SimilarityMatrix | None = None,
    attention: Iterable[AttentionStats] | AttentionStats | None = None,
    metadata: dict | None = None,
    plots: bool = True,
    manifest: Manifest | None = None,
) -> Manifest:
    """Write CKA and attention tables, figures and a manifest into ``out_dir``.

    When ``manifest`` is given the files are recorded there and no separate
    manifest file is written; otherwise ``out_dir/manifest.json`` is.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    own = manifest is None
    man = manifest if manifest is not None else Manifest(out, metadata)
    sims = [similarities] if isinstance(similarities, SimilarityMatrix) else list(similarities or [])
    atts = [attention] if isinstance(attention, AttentionStats) else list(attention or [])

    if sims:
        rows = []
        for s in sims:
            v = s.values
            for i in range(v.shape[0]):
                for j in range(v.shape[1]):
                    rows.append({"model_a": s.model_a, "model_b": s.model_b, "layer_a": i, "layer_b": j, "cka": float(v[i, j])})
        man.add(write_csv(out / "cka.csv", rows), "metrics")
        if plots:
            for s in sims:
                name = f"cka_{_slug(s.model_a)}_vs_{_slug(s.model_b)}.png"
                man.add(plot_similarity(s, out / name), "plot")

    if atts:
        for metric in ("distance", "entropy"):
            rows = []
            for s in atts:
                values = getattr(s, metric)
                for k in range(values.shape[0]):
                    for h in range(values.shape[1]):
                        rows.append({"model": s.model, "layer": k + 1, "head": h, metric: float(values[k, h])})
            man.add(write_csv(out / f"attention_{metric}.csv", rows), "metrics")
            if plots:
                man.add(plot_attention_boxes(atts, metric, out / f"attention_{metric}_boxplot.png"), "plot")

    if own:
        man.write()
    return man
