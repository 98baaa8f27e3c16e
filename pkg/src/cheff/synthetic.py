"""Seeded toy corpus: soft ellipses and rectangles with matching reports."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cheff.io import atomic_write, write_pgm
from cheff.rng import RngState


@dataclass
class Shape:
    kind: str          # "ellipse" | "rectangle"
    cx: float
    cy: float
    rx: float
    ry: float
    intensity: float

    def describe(self) -> str:
        vert = "upper" if self.cy < 0.5 else "lower"
        horiz = "left" if self.cx < 0.5 else "right"
        size = "large" if max(self.rx, self.ry) > 0.2 else "small"
        tone = "bright" if self.intensity > 0.7 else "faint"
        return f"{size} {tone} {self.kind} in the {vert} {horiz} region"


def random_shapes(rng: RngState, max_shapes: int = 3) -> list[Shape]:
    count = int(rng.integers(1, max_shapes + 1, size=1)[0])
    u = rng.uniform((count, 6))
    shapes = []
    for i in range(count):
        kind = "ellipse" if u[i, 0] < 0.5 else "rectangle"
        shapes.append(Shape(kind, 0.2 + 0.6 * u[i, 1], 0.2 + 0.6 * u[i, 2],
                            0.08 + 0.2 * u[i, 3], 0.08 + 0.2 * u[i, 4], 0.5 + 0.45 * u[i, 5]))
    return shapes


def render(shapes: list[Shape], size: int, background: float = 0.15, softness: float = 0.02) -> np.ndarray:
    """Rasterize shapes into a ``[size, size]`` image in [0, 1]."""
    c = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    img = np.full((size, size), background)
    for s in shapes:
        dx, dy = (xx - s.cx) / s.rx, (yy - s.cy) / s.ry
        if s.kind == "ellipse":
            dist = np.sqrt(dx * dx + dy * dy) - 1.0
        else:
            dist = np.maximum(np.abs(dx), np.abs(dy)) - 1.0
        alpha = 1.0 / (1.0 + np.exp(np.clip(dist * min(s.rx, s.ry) / softness, -50, 50)))
        img = img * (1 - alpha) + s.intensity * alpha
    return np.clip(img, 0.0, 1.0)


def report_for(shapes: list[Shape]) -> str:
    findings = " ".join(f"There is a {s.describe()}." for s in shapes)
    n = len(shapes)
    impression = "Single opacity." if n == 1 else f"{n} opacities."
    return f"EXAMINATION: synthetic phantom\nFINDINGS: {findings}\nIMPRESSION: {impression}\n"


def make_corpus(root, n: int = 200, size: int = 128, seed: int = 0,
                sources: dict[str, float] | None = None) -> dict[str, Path]:
    """Write ``n`` PGM images plus ``.txt`` reports split across source folders.

    ``sources`` maps a source name to its share of the images; the default
    splits 60/40 between sources ``a`` and ``b``.  Returns the source roots.
    """
    root = Path(root)
    sources = sources or {"a": 0.6, "b": 0.4}
    names = list(sources)
    shares = np.array([sources[k] for k in names], dtype=np.float64)
    counts = np.floor(shares / shares.sum() * n).astype(int)
    counts[0] += n - counts.sum()
    rng = RngState(seed)
    roots = {}
    for name, count in zip(names, counts):
        src = root / name
        src.mkdir(parents=True, exist_ok=True)
        roots[name] = src
        for i in range(count):
            shapes = random_shapes(rng)
            write_pgm(src / f"img_{i:04d}.pgm", render(shapes, size))
            atomic_write(src / f"img_{i:04d}.txt", report_for(shapes))
    return roots


def main(argv=None) -> None:
    import argparse

    p = argparse.ArgumentParser(prog="python -m cheff.synthetic", description="write the seeded toy corpus")
    p.add_argument("root")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    for name, path in make_corpus(args.root, args.n, args.size, args.seed).items():
        print(f"{name}={path}")


if __name__ == "__main__":
    main()
