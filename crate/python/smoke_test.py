"""Smoke test for the lae_py extension module.

Builds the conjugate model, checks a Langevin chain against the closed-form
posterior, and drives one experiment end to end. Build the module first:

    cargo build --release -p lae-py

The script stages ``liblae_py.so`` from ``target/`` as an importable
``lae_py.so`` next to it, so no installation step is required.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path


def load_module():
    root = Path(__file__).resolve().parent.parent
    for profile in ("release", "debug"):
        built = root / "target" / profile / "liblae_py.so"
        if built.exists():
            staged = built.parent / "lae_py.so"
            if not staged.exists() or built.stat().st_mtime > staged.stat().st_mtime:
                shutil.copy2(built, staged)
            sys.path.insert(0, str(staged.parent))
            import lae_py

            return lae_py
    raise SystemExit("build the module first: cargo build --release -p lae-py")


def main():
    lae = load_module()

    model = lae.Model()
    assert model.latent_dim == 2 and model.obs_dim == 2

    xs, _zs = model.sample_joint(3, seed=9001)
    x = xs[0]
    mean, cov = model.posterior_mean_cov(x)
    assert len(mean) == 2 and len(cov) == 4

    draws = model.sample_posterior(x, steps=4000, burn_in=500, step_size=0.05, seed=11)
    est = [sum(s[i] for s in draws) / len(draws) for i in range(len(mean))]
    err = math.sqrt(sum((a - b) ** 2 for a, b in zip(est, mean)))
    assert err < 0.1, f"chain mean off by {err:.3f}"

    u, grad = model.potential(x, mean)
    assert math.isfinite(u) and all(math.isfinite(g) for g in grad)

    out = Path(tempfile.mkdtemp(prefix="lae-smoke-"))
    config = "[data]\nn = 2\n\n[sampler]\nstep_size = 0.05\nsteps = 2000\nburn_in = 500\n"
    lae.run_experiment("sample-ld", config, seed=0, out_dir=str(out))
    for name in ("metrics.csv", "config_used.txt"):
        assert (out / name).exists(), f"missing {name}"
    shutil.rmtree(out)

    print(f"smoke test passed: chain mean within {err:.3f} of the closed form; artifacts written")


if __name__ == "__main__":
    main()
