"""Write the packaged synthetic mass-cytometry panel (5000 cells, 15 markers, 8 populations).

Each population has a fixed expression level per marker in arcsinh(x/5)
space (negative, low or high); cells are Gaussian around those levels and
mapped back to non-negative ion counts.
"""
import csv
from pathlib import Path

import numpy as np

MARKERS = ["CD45", "CD3", "CD4", "CD8", "CD19", "CD20", "CD14", "CD16", "CD56",
           "HLA-DR", "CD11c", "CD123", "CD33", "CD38", "CD45RA"]

NEG, LOW, HIGH = 0.3, 2.2, 4.2

# population -> (size, {marker: level}); unspecified markers are negative
POPULATIONS = {
    "CD4_T": (1400, {"CD45": HIGH, "CD3": HIGH, "CD4": HIGH, "CD45RA": LOW}),
    "CD8_T": (900, {"CD45": HIGH, "CD3": HIGH, "CD8": HIGH, "CD45RA": HIGH}),
    "B": (700, {"CD45": HIGH, "CD19": HIGH, "CD20": HIGH, "HLA-DR": HIGH, "CD45RA": HIGH}),
    "NK": (600, {"CD45": HIGH, "CD16": HIGH, "CD56": HIGH, "CD8": LOW, "CD45RA": LOW}),
    "classical_mono": (600, {"CD45": HIGH, "CD14": HIGH, "HLA-DR": HIGH, "CD33": HIGH, "CD11c": LOW}),
    "nonclassical_mono": (350, {"CD45": HIGH, "CD14": LOW, "CD16": HIGH, "HLA-DR": HIGH, "CD33": LOW}),
    "mDC": (250, {"CD45": HIGH, "HLA-DR": HIGH, "CD11c": HIGH, "CD33": LOW, "CD38": LOW}),
    "pDC": (200, {"CD45": HIGH, "HLA-DR": LOW, "CD123": HIGH, "CD38": HIGH, "CD45RA": HIGH}),
}

SPREAD = 0.45
COFACTOR = 5.0


def generate(seed: int = 0):
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for name, (size, levels) in POPULATIONS.items():
        centre = np.array([levels.get(m, NEG) for m in MARKERS])
        v = centre + SPREAD * rng.standard_normal((size, len(MARKERS)))
        rows.append(np.maximum(COFACTOR * np.sinh(v), 0.0))
        labels += [name] * size
    x = np.concatenate(rows)
    labels = np.array(labels)
    order = rng.permutation(len(x))
    return x[order], labels[order]


def main():
    out = Path(__file__).resolve().parents[1] / "src" / "moesimvae" / "resources" / "cytof_synthetic.csv"
    x, labels = generate()
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MARKERS + ["population"])
        for row, lab in zip(x, labels):
            w.writerow([f"{v:.3f}" for v in row] + [lab])
    print(f"wrote {len(x)} rows to {out}")


if __name__ == "__main__":
    main()
