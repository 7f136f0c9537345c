"""PNG figures for sweep and fidelity-grid reports (headless Agg backend)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import SweepRow  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "font.size": 9,
}


def _series(rows: Sequence[SweepRow], scheme: str, x: str, y: str):
    pts = [(getattr(r, x), getattr(r, y)) for r in rows if r.scheme == scheme]
    pts = [(a, b) for a, b in pts if not (isinstance(a, float) and math.isnan(a))]
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_sweep(rows: Sequence[SweepRow], out_dir: Union[str, Path], stem: str = "sweep") -> List[Path]:
    """GVIF vs SNR, GVIF vs latency and alpha* vs SNR, one PNG each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schemes = sorted({r.scheme for r in rows})
    paths = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for s in schemes:
            ax.plot(*_series(rows, s, "snr_db", "mean_gvif"), marker="o", label=s)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("mean GVIF")
        ax.set_ylim(0, 1)
        ax.legend()
        paths.append(_save(fig, out_dir / f"{stem}_gvif_vs_snr.png"))

        fig, ax = plt.subplots()
        for s in schemes:
            lat, v = _series(rows, s, "latency_s", "mean_gvif")
            keep = ~np.isnan(lat)
            ax.plot(1e3 * lat[keep], v[keep], marker="s", linestyle="none", label=s)
        ax.set_xlabel("mean latency (ms)")
        ax.set_ylabel("mean GVIF")
        ax.legend()
        paths.append(_save(fig, out_dir / f"{stem}_gvif_vs_latency.png"))

        fig, ax = plt.subplots()
        snr, alpha = _series(rows, "adaptive", "snr_db", "alpha")
        ax.plot(snr, alpha, marker="^", color="C2")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("selected threshold")
        ax.set_ylim(-0.02, 1)
        paths.append(_save(fig, out_dir / f"{stem}_alpha_vs_snr.png"))
    return paths


def plot_gvif_grid(grid: np.ndarray, psnr_db: Sequence[float], alphas: Sequence[float],
                   path: Union[str, Path]) -> Path:
    """Mean GVIF against profile PSNR, one curve per threshold."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, a in enumerate(alphas):
            ax.plot(psnr_db, grid[:, k], marker=".", label=f"alpha={a:g}")
        ax.set_xlabel("profile PSNR (dB)")
        ax.set_ylabel("mean GVIF")
        ax.legend(ncol=2)
        return _save(fig, Path(path))
