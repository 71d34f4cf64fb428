# %% [markdown]
# # Averaging over truncation levels vs picking one
#
# Sparse, noisy curves are summarized by functional principal component
# scores, and a linear quantile regression on the first J scores predicts the
# 5% conditional quantile of a scalar response. Choosing J is the hard part.
# Here we compare choosing it (FVE, AIC, BIC) with averaging the fits for
# several J using cross-validated weights.
#
# Run with ``python demos/01_averaging_vs_selection.py``; it takes about a
# minute on one core.

# %%
import numpy as np

from fdqma.averaging import apply_method, parse_method
from fdqma.evaluation import efpe
from fdqma.fpca import fit_fpca
from fdqma.simulation import DesignSpec, generate, run_experiment

spec = DesignSpec(design="I", n=300, n_test=1000, tau=0.05, r_squared=0.5, seed=2024)
data = generate(spec)
print(f"{len(data.train_curves)} training curves, "
      f"{np.mean([len(c) for c in data.train_curves]):.1f} observations each on average")

# %% [markdown]
# ## One dataset, step by step
#
# The FPCA is fitted once on the training curves. Its eigenvalues decay
# roughly like j^-1.2 because that is how the curves were generated.

# %%
model = fit_fpca(data.train_curves, data.grid, j_max=20)
print("bandwidths (mean, covariance):", np.round(model.bandwidths, 3))
print("noise variance:", round(model.noise_variance, 3))
print("leading eigenvalues:", np.round(model.eigenvalues[:6], 3))
print("cumulative FVE:", np.round(model.fve_cumulative[:6], 3))

# %% [markdown]
# Test curves are scored with the training model. Every method sees the same
# fits, cached by truncation level.

# %%
test_scores = model.scores_for(data.test_curves)
j_range = range(model.n_components + 1)
fits = {}
for label in ("MA(FVE90±4,K4)", "FVE90", "AIC", "BIC", "SAIC"):
    out = apply_method(parse_method(label), model, data.train_responses, spec.tau,
                       test_scores, j_range, fits)
    score = efpe(data.test_responses, out.predictions, data.test_quantiles, spec.tau)
    weights = {j: round(w, 3) for j, w in out.weights.items() if w > 1e-3}
    print(f"{label:>15}  excess loss {score:.5f}  weights {weights}")

# %% [markdown]
# ## Many datasets
#
# A single dataset is noisy. Averaging the excess loss over replications
# shows the systematic picture.

# %%
res = run_experiment(spec, ["MA(FVE90±4,K4)", "FVE90", "AIC", "BIC", "SAIC", "SBIC"], 10)
for method, entry in res.summary()["methods"].items():
    e = entry["efpe"]
    print(f"{method:>15}  mean {e['mean']:.5f}  se {e['se']:.5f}")
