"""Run artifact export: history CSV, field rasters and samples, fiber
geometry, checkpoints, report figures, and the run summary.

All artifacts of a run are staged with a `.partial` suffix and renamed in
one commit pass, so a crashed run never leaves a complete-looking output
directory. CSV files are RFC-4180 with a header row and LF endings. PNG
rasters carry one pixel per field sample, grayscale, origin at the
bottom-left (dense material is dark). Checkpoints are versioned npz
archives holding the network configuration, the frozen frequency matrix,
the trained weights, and the mesh.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import fea, fibers, field, training

CHECKPOINT_VERSION = 1


class RunWriter:
    """Stages artifact files and commits them atomically.

    Files are written to `<name>.partial`; `commit()` renames everything
    at once. An abandoned writer leaves only `.partial` files behind.
    """

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.staged: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def stage(self, name: str) -> str:
        path = os.path.join(self.out_dir, name + ".partial")
        self.staged.append(name)
        return path

    def commit(self) -> list[str]:
        final = []
        for name in self.staged:
            src = os.path.join(self.out_dir, name + ".partial")
            dst = os.path.join(self.out_dir, name)
            os.replace(src, dst)
            final.append(dst)
        self.staged = []
        return final


def write_history_csv(history: list[training.EpochRecord], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "J", "J_scaled", "g_m", "g_f", "L",
                    "alpha", "p", "dw_norm", "wall_ms"])
        for r in history:
            b = r.breakdown
            w.writerow([r.epoch, repr(b.j), repr(b.j_scaled), repr(b.g_m),
                        repr(b.g_f), repr(b.total), repr(r.alpha), repr(r.p),
                        repr(r.dw_norm), f"{r.wall_ms:.3f}"])


def save_checkpoint(path: str, result: training.RunResult,
                    net: field.NetworkConfig, grid: fea.StructuredGrid,
                    problem_name: str) -> None:
    arrays = {"freq": result.embedding.freq}
    for i, (w, b) in enumerate(zip(result.weights.weights,
                                   result.weights.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    header = {"version": CHECKPOINT_VERSION,
              "problem": problem_name,
              "network": field.checkpoint_config(net),
              "mesh": {"nelx": grid.nelx, "nely": grid.nely, "h": grid.h},
              "n_layers": len(result.weights.weights)}
    np.savez(path, header=json.dumps(header), **arrays)


def load_checkpoint(path: str):
    """Returns (weights, embedding, network config, grid, problem name)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {header.get('version')} unsupported "
                f"(expected {CHECKPOINT_VERSION})")
        net = field.config_from_dict(header["network"])
        weights = field.MlpWeights(
            [data[f"w{i}"] for i in range(header["n_layers"])],
            [data[f"b{i}"] for i in range(header["n_layers"])])
        emb = field.FourierEmbedding(data["freq"])
        mesh = header["mesh"]
        grid = fea.build_grid(mesh["nelx"], mesh["nely"], mesh["h"])
    return weights, emb, net, grid, header["problem"]


def make_field_query(weights: field.MlpWeights, emb: field.FourierEmbedding,
                     net: field.NetworkConfig):
    """Point-query closure for extraction and sampling. In multi-material
    mode `rho_m` is the fiber-bearing phase density."""

    def q(points: np.ndarray) -> dict[str, np.ndarray]:
        out = field.query(weights, emb, net, points)
        if "phases" in out:
            out["rho_m"] = out["phases"][:, 0]
        return out

    return q


def sample_grid(grid: fea.StructuredGrid, supersample: int) -> np.ndarray:
    """Pixel-center sample points, (s*nelx * s*nely, 2), row-major from
    the bottom-left."""
    nx, ny = grid.nelx * supersample, grid.nely * supersample
    dx = grid.width / nx
    dy = grid.height / ny
    x = (np.arange(nx) + 0.5) * dx
    y = (np.arange(ny) + 0.5) * dy
    xx, yy = np.meshgrid(x, y)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def write_field_csv(points: np.ndarray, sampled: dict, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "rho_m", "rho_f", "theta"])
        for k in range(points.shape[0]):
            w.writerow([f"{points[k, 0]:.6f}", f"{points[k, 1]:.6f}",
                        repr(sampled["rho_m"][k]), repr(sampled["rho_f"][k]),
                        repr(sampled["theta"][k])])


def write_density_png(values: np.ndarray, nx: int, ny: int, path: str) -> None:
    """One pixel per sample; dense material renders dark, origin
    bottom-left."""
    img = 1.0 - values.reshape(ny, nx)
    plt.imsave(path, img, cmap="gray", vmin=0.0, vmax=1.0, origin="lower",
               format="png")


def write_fiber_svg(tracks: list[fibers.FiberTrack],
                    grid: fea.StructuredGrid, path: str) -> None:
    """Tracks as SVG polylines, stroke width = fiber thickness; the SVG y
    axis points down, so y is flipped against the domain height."""
    hgt = grid.height
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'viewBox="0 0 {grid.width} {hgt}">',
             f'<rect width="{grid.width}" height="{hgt}" fill="white"/>']
    for tr in tracks:
        pts = " ".join(f"{p[0]:.4f},{hgt - p[1]:.4f}" for p in tr.points)
        lines.append(f'<polyline points="{pts}" fill="none" stroke="black" '
                     f'stroke-width="{tr.thickness}" stroke-linecap="round"/>')
    lines.append("</svg>")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_polylines(tracks: list[fibers.FiberTrack], path: str) -> None:
    """Plain-text export: per track a `track <id> thickness <t>` header
    followed by one `x y` pair per line, 6 decimals, LF endings."""
    with open(path, "w", newline="") as fh:
        for i, tr in enumerate(tracks):
            fh.write(f"track {i} thickness {tr.thickness:.6f}\n")
            for p in tr.points:
                fh.write(f"{p[0]:.6f} {p[1]:.6f}\n")


def read_polylines(path: str) -> list[fibers.FiberTrack]:
    tracks = []
    points: list[list[float]] = []
    thickness = 0.0
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "track":
                if points:
                    tracks.append(fibers.FiberTrack(np.array(points), thickness))
                thickness = float(parts[3])
                points = []
            else:
                points.append([float(parts[0]), float(parts[1])])
    if points:
        tracks.append(fibers.FiberTrack(np.array(points), thickness))
    return tracks


def plot_convergence(history: list[training.EpochRecord], path: str) -> None:
    epochs = [r.epoch for r in history]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(epochs, [r.breakdown.j_scaled for r in history], label="J / J0")
    ax1.plot(epochs, [r.breakdown.total for r in history], label="loss")
    ax1.set_ylabel("objective")
    ax1.legend()
    ax1.grid(alpha=0.3)
    ax2.plot(epochs, [r.breakdown.g_m for r in history], label="g_m")
    ax2.plot(epochs, [r.breakdown.g_f for r in history], label="g_f")
    ax2.axhline(0.0, color="k", lw=0.5)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("constraint")
    ax2.legend()
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, format="png")
    plt.close(fig)


def plot_design(sampled: dict, points: np.ndarray, grid: fea.StructuredGrid,
                nx: int, ny: int, tracks: list[fibers.FiberTrack],
                path: str) -> None:
    """Density map with an orientation quiver and extracted fibers."""
    fig, axes = plt.subplots(1, 2, figsize=(12, 4))
    rho = sampled["rho_m"].reshape(ny, nx)
    axes[0].imshow(1.0 - rho, cmap="gray", vmin=0, vmax=1, origin="lower",
                   extent=(0, grid.width, 0, grid.height))
    stride = max(1, nx // 30)
    xs = points[:, 0].reshape(ny, nx)[::stride, ::stride]
    ys = points[:, 1].reshape(ny, nx)[::stride, ::stride]
    th = sampled["theta"].reshape(ny, nx)[::stride, ::stride]
    mask = rho[::stride, ::stride] > 0.5
    axes[0].quiver(xs[mask], ys[mask], np.cos(th[mask]), np.sin(th[mask]),
                   color="tab:red", scale=40, width=0.002, headwidth=1)
    axes[0].set_title("matrix density and orientation")
    axes[1].imshow(1.0 - sampled["rho_f"].reshape(ny, nx), cmap="gray",
                   vmin=0, vmax=1, origin="lower",
                   extent=(0, grid.width, 0, grid.height), alpha=0.35)
    for tr in tracks:
        axes[1].plot(tr.points[:, 0], tr.points[:, 1], color="tab:blue",
                     lw=0.6)
    axes[1].set_title(f"fiber density and {len(tracks)} extracted tracks")
    for ax in axes:
        ax.set_aspect("equal")
        ax.set_xlim(0, grid.width)
        ax.set_ylim(0, grid.height)
    fig.tight_layout()
    fig.savefig(path, dpi=120, format="png")
    plt.close(fig)


def export_run(out_dir: str, cfg: dict, problem: training.Problem,
               result: training.RunResult, wall_s: float) -> dict:
    """Write the full artifact set for one optimization run; returns the
    summary dict."""
    writer = RunWriter(out_dir)
    grid = problem.grid
    net = problem.network

    write_history_csv(result.history, writer.stage("history.csv"))
    save_checkpoint(writer.stage("checkpoint.npz"), result, net, grid,
                    cfg["problem"])

    s = int(cfg["output"]["supersample"])
    points = sample_grid(grid, s)
    q = make_field_query(result.weights, result.embedding, net)
    sampled = q(points)
    nx, ny = grid.nelx * s, grid.nely * s
    write_density_png(sampled["rho_m"], nx, ny, writer.stage("rho_m.png"))
    write_density_png(sampled["rho_f"], nx, ny, writer.stage("rho_f.png"))
    write_field_csv(points, sampled, writer.stage("field.csv"))

    tracks = fibers.extract_fibers(q, grid, _extraction(cfg))
    write_fiber_svg(tracks, grid, writer.stage("fibers.svg"))
    write_polylines(tracks, writer.stage("fibers.txt"))

    plot_convergence(result.history, writer.stage("convergence.png"))
    plot_design(sampled, points, grid, nx, ny, tracks,
                writer.stage("design.png"))

    final = result.final
    summary = {
        "problem": cfg["problem"],
        "seed": cfg["seed"],
        "epochs": len(result.history),
        "converged": result.converged,
        "J": final.breakdown.j,
        "J_scaled": final.breakdown.j_scaled,
        "J0": result.j0,
        "g_m": final.breakdown.g_m,
        "g_f": final.breakdown.g_f,
        "loss": final.breakdown.total,
        "wall_s": wall_s,
        "n_tracks": len(tracks),
        "artifacts": sorted(writer.staged + ["summary.json"]),
    }
    with open(writer.stage("summary.json"), "w", newline="") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    writer.commit()
    return summary


def _extraction(cfg: dict) -> fibers.ExtractionParams:
    ext = cfg["extraction"]
    return fibers.ExtractionParams(thickness=ext["thickness"],
                                   step=ext["step"],
                                   void_threshold=ext["void_threshold"])
