"""Report figures rendered with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def two_point_figure(table, oracle, path) -> Path:
    """Measured <zeta(0) zeta(x)> against an oracle row, if given."""
    table = np.asarray(table)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(table.shape[0])
    ax.plot(x, table[0], "o-", label="statevector")
    if oracle is not None:
        ax.plot(x, np.asarray(oracle)[0], "x--", label="mode sum")
    ax.set_xlabel("site separation")
    ax.set_ylabel("<zeta(0) zeta(x)>")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def power_spectrum_figure(k, measured, continuum, plateau, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    order = np.argsort(k)
    ax.loglog(np.asarray(k)[order], np.abs(np.asarray(measured))[order], "o", label="lattice state")
    if continuum is not None:
        ax.loglog(np.asarray(k)[order], np.asarray(continuum)[order], "-", label="continuum modes")
    ax.axhline(plateau, color="grey", ls=":", label="superhorizon plateau")
    ax.set_xlabel("k")
    ax.set_ylabel("P(k)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def trace_figure(rows, xlabel, path) -> Path:
    """Energy and norm along a trace of (step, x, norm, energy, ...) rows."""
    rows = np.asarray([r[:4] for r in rows], dtype=float)
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(5, 5), sharex=True)
    a1.plot(rows[:, 1], rows[:, 3], ".-")
    a1.set_ylabel("energy")
    a2.plot(rows[:, 1], rows[:, 2] - 1.0, ".-")
    a2.set_ylabel("norm - 1")
    a2.set_xlabel(xlabel)
    fig.tight_layout()
    return _save(fig, path)
