"""Check residual structure after a fit: ARMA whitening and spatial leftovers.

Run with ``python demos/diagnostics_tour.py``.
"""

# # Normalized residuals
#
# Raw residuals inherit the within-plot ARMA(1,1) correlation.  Whitening
# them with the fitted error model should leave nearly uncorrelated values
# with unit variance.

import numpy as np

from stgamm import (SmoothConfig, SyntheticConfig, acf_pacf, empirical_semivariogram, fit_gamm,
                    normalized_residuals, synthesize_plots)

data = synthesize_plots(SyntheticConfig(n_side=10, n_years=12, phi=0.6, theta=0.2), seed=5)
smooth = SmoothConfig(k_space=15, k_time=6, k_age=5)

fits = {"arma11": fit_gamm(data.table, smooth),
        "none": fit_gamm(data.table, smooth, correlation="none")}

for name, model in fits.items():
    res = normalized_residuals(model, data.table)
    raw = acf_pacf(res, max_lag=3, values=res.raw)
    white = acf_pacf(res, max_lag=3)
    print(f"{name:7s} sd(normalized)={res.normalized.std():.2f}")
    print("        raw ACF   ", np.round(raw.acf[1:], 3))
    print("        whitened  ", np.round(white.acf[1:], 3), " band +-", np.round(white.band[1], 3))

# Without the error model the whitened ACF is the raw one, and the lag-1
# value stays well outside the band.

# # Spatial structure
#
# A flat semivariogram of normalized residuals means the space-time smooth
# absorbed the spatial signal.

res = normalized_residuals(fits["arma11"], data.table)
v = empirical_semivariogram(res)
ok = v.count > 0
for c, g, n in zip(v.center[ok][:8], v.gamma[ok][:8], v.count[ok][:8]):
    print(f"  {c / 1000:6.1f} km  gamma={g:.3f}  pairs={n}")
