"""Time the numba and numpy implementations of the two hot kernels:
per-element form blocks (mesh assembly) and boundary-panel matrix fill.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --h 0.02 0.01 --panels 64 128 --repeats 5

The numba path is JIT-warmed on a tiny problem before timing, so reported
numbers exclude compilation.
"""

from __future__ import annotations

import argparse
import statistics
import time

from steklovlab import _accel, assembly, geometry, potentials


def _coeff():
    return assembly.CoefficientField(
        a=assembly.checkerboard(cell=0.25, low=1.0, high=4.0, origin=(0.0137, 0.0071)),
        v0=assembly.constant_potential(1.0),
        rho=assembly.constant_weight(1.0),
    )


def _time(fn, repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench_assembly(h: float, repeats: int, backends) -> dict:
    mesh = geometry.triangulate(geometry.make_domain("square"), h)
    coeff = _coeff()
    out = {"label": f"element forms  h={h:g}  ({len(mesh.triangles)} triangles)"}
    for b in backends:
        out[b] = _time(lambda: assembly.assemble_forms(mesh, coeff, backend=b), repeats)
    return out


def bench_panels(ppe: int, repeats: int, backends) -> dict:
    dom = geometry.make_domain("square")
    out = {"label": f"panel fill     {4 * ppe} panels"}
    for b in backends:
        out[b] = _time(
            lambda: potentials.build_layer_operators(dom, ppe, backend=b), repeats
        )
    return out


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h", type=float, nargs="+", default=[0.05, 0.02])
    ap.add_argument("--panels", type=int, nargs="+", default=[64, 192])
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    backends = ["numpy"]
    if _accel.HAS_NUMBA:
        backends.append("numba")
        # warm the JIT caches outside the timed region
        mesh = geometry.triangulate(geometry.make_domain("square"), 0.3)
        assembly.assemble_forms(mesh, _coeff(), backend="numba")
        potentials.build_layer_operators(geometry.make_domain("square"), 2, backend="numba")
    else:
        print("numba not importable; timing the numpy path only")

    rows = []
    for h in args.h:
        rows.append(bench_assembly(h, args.repeats, backends))
    for ppe in args.panels:
        rows.append(bench_panels(ppe, args.repeats, backends))

    width = max(len(r["label"]) for r in rows)
    header = f"{'kernel':<{width}}  " + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for r in rows:
        line = f"{r['label']:<{width}}  " + "".join(
            f"{r[b] * 1e3:>10.2f}ms" for b in backends
        )
        if len(backends) == 2:
            line += f"{r['numpy'] / r['numba']:>9.2f}x"
        print(line)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
