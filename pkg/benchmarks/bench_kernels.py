"""Time the numba kernels against their numpy twins.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N wall time for each backend and
checks that both backends agree. The first jitted call (compilation) is
excluded from the timings.
"""

import argparse
import timeit

import numpy as np

from vistr import kernels
from vistr.sim import ArmSpec, forward_kinematics, gen_trajectory


def capsule_inputs(T=240):
    arm = ArmSpec()
    traj = gen_trajectory(arm, T, seed=0)
    pts = [arm.to_pixels(forward_kinematics(a, arm)) for a in traj]
    return arm, pts


def bench_render(repeat):
    arm, pts = capsule_inputs()
    args = (arm.radius_px, arm.height, arm.width)

    def run(fn):
        return [fn(r, c, *args) for r, c in pts]

    if kernels.HAVE_NUMBA:
        ref, fast = run(kernels.render_capsules_numpy), run(kernels.render_capsules_numba)
        assert all(np.array_equal(a, b) for a, b in zip(ref, fast)), "render backends disagree"
    times = {"numpy": min(timeit.repeat(lambda: run(kernels.render_capsules_numpy), number=1, repeat=repeat))}
    if kernels.HAVE_NUMBA:
        times["numba"] = min(timeit.repeat(lambda: run(kernels.render_capsules_numba), number=1, repeat=repeat))
    return f"render 240 frames {arm.height}x{arm.width}", times


def bench_se(repeat, T=1000):
    t = np.arange(T, dtype=np.float64)
    if kernels.HAVE_NUMBA:
        a = kernels.se_kernel_matrix_numpy(t, t, 1.3, 17.0)
        b = kernels.se_kernel_matrix_numba(t, t, 1.3, 17.0)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-15), "SE backends disagree"
    times = {"numpy": min(timeit.repeat(lambda: kernels.se_kernel_matrix_numpy(t, t, 1.3, 17.0),
                                        number=5, repeat=repeat)) / 5}
    if kernels.HAVE_NUMBA:
        times["numba"] = min(timeit.repeat(lambda: kernels.se_kernel_matrix_numba(t, t, 1.3, 17.0),
                                           number=5, repeat=repeat)) / 5
    return f"SE kernel {T}x{T}", times


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    print(f"numba available: {kernels.HAVE_NUMBA}, selected: {kernels.USE_NUMBA}")
    for name, times in (bench_render(args.repeat), bench_se(args.repeat)):
        cols = "  ".join(f"{k} {v * 1e3:9.2f} ms" for k, v in times.items())
        speedup = f"  speedup x{times['numpy'] / times['numba']:.1f}" if "numba" in times else ""
        print(f"{name:<28} {cols}{speedup}")


if __name__ == "__main__":
    main()
