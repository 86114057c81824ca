# throwaway calibration driver (not part of the package)
import sys
import time

import numpy as np

import fmda
from fmda.harness.config import load_experiment_config
from fmda.harness import experiments

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
noise_max = float(sys.argv[2]) if len(sys.argv) > 2 else 0.2
clean_prob = float(sys.argv[3]) if len(sys.argv) > 3 else 0.5

cfg = load_experiment_config(None, [
    f"train.iters_stage1={iters}",
    f"train.noise_max={noise_max}",
    f"train.noise_clean_prob={clean_prob}",
])
print("generating data...")
traj = fmda.generate_dataset(cfg.dynamics, cfg.data_spinup, cfg.data_length, cfg.seed)
clim = traj.climatology()
print("clim mean/std:", clim.mean, clim.std)

t0 = time.time()
model, losses = fmda.train_stage1(traj, cfg.arch, cfg.train, cfg.seed)
print(f"stage1 {iters} iters in {(time.time()-t0)/60:.1f} min")
print("loss head/tail:", np.mean(losses[:100]), np.mean(losses[-100:]))
fmda.save_checkpoint(model, "/tmp/calib_stage1.ckpt")

# single-step + noise sweep evaluation
records = experiments.run_noise_sweep(cfg, model=model)


def mean_over(records, alpha, sigma, field):
    rows = [r for r in records if r.alpha == alpha and r.sigma_noise == sigma]
    return float(np.mean([getattr(r, field) for r in rows]))


bg = mean_over(records, cfg.alphas[0], 0.0, "rmse_background")
print(f"\nmean background RMSE: {bg:.4f}  (clim std {clim.std[0]:.3f})")
print("analysis RMSE table (rows alpha, cols sigma):")
print("            " + "  ".join(f"s={s:4.2f}" for s in cfg.sigmas))
for a in cfg.alphas:
    row = [mean_over(records, a, s, "rmse_analysis") for s in cfg.sigmas]
    flags = "".join(" " if r < bg else "!" for r in row)
    print(f"  a={a:4.2f}: " + "  ".join(f"{r:6.4f}" for r in row) + "  " + flags)

print("\ncriterion-5 ratio at alpha=0.2, sigma=0:",
      mean_over(records, 0.2, 0.0, "rmse_analysis") / bg)

# interp baseline comparison
icfg = load_experiment_config(None, ["assimilator=interp"])
irec = experiments.run_single_step(icfg)
for a in cfg.alphas:
    print(f"interp a={a}: {mean_over(irec, a, 0.0, 'rmse_analysis'):.4f}")
