"""Byte-stable SVG bar charts of absolute-error distributions."""

from __future__ import annotations

import io
from typing import Dict, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed element ids and no timestamp, so identical data gives identical bytes
_RC = {"svg.hashsalt": "cafv", "svg.fonttype": "none", "font.family": "DejaVu Sans"}


def error_histogram_svg(histograms: Mapping[str, Dict[int, int]], bin_width: float,
                        title: str = "absolute error distribution") -> str:
    """Grouped bars, one group per error bin, one bar colour per run (e.g. baseline / augmented)."""
    bins = sorted({b for h in histograms.values() for b in h})
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        n = max(len(histograms), 1)
        width = 0.8 / n
        for k, (name, hist) in enumerate(histograms.items()):
            total = sum(hist.values()) or 1
            xs = [b + (k - (n - 1) / 2) * width for b in bins]
            ax.bar(xs, [hist.get(b, 0) / total for b in bins], width=width, label=name)
        ax.set_xticks(bins)
        ax.set_xticklabels([f"{b * bin_width:g}" for b in bins])
        ax.set_xlabel("absolute error (m/s)")
        ax.set_ylabel("fraction of test samples")
        ax.set_title(title)
        if histograms:
            ax.legend()
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()
