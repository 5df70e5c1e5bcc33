"""Association, survival and disparity analyses on a simulated cohort.

    python demos/cohort_statistics.py
"""

import numpy as np

from cinema import stats


def main():
    rng = np.random.default_rng(0)
    n = 5000
    cov = {
        "disease": rng.integers(0, 2, n).astype(float),
        "age": rng.normal(62, 8, n),
        "sex": rng.integers(0, 2, n).astype(float),
        "bmi": rng.normal(27, 4, n),
    }
    lvef = 58 - 2.5 * cov["disease"] - 0.05 * (cov["age"] - 62) + rng.normal(0, 4, n)

    fit = stats.ols_fit(lvef, cov)
    lo, hi = fit["disease"]["ci"]
    print(f"LVEF ~ disease: {fit['disease']['coef']:.2f} (95% CI {lo:.2f} to {hi:.2f}), planted -2.50")

    # lower EF, higher hazard
    hazard = 0.02 * np.exp(-0.06 * (lvef - 55) + 0.03 * (cov["age"] - 62))
    time = rng.exponential(1 / hazard)
    event = time < 10
    surv = stats.cox_fit(np.minimum(time, 10), event.astype(int), {"lvef": lvef, "age": cov["age"]})
    print(f"Cox HR per EF point {np.exp(surv['lvef']['coef']):.3f}, planted {np.exp(-0.06):.3f}")

    groups = np.where(rng.random(n) < 0.3, "NonWhite", "White")
    error = np.abs(rng.normal(0, 3, n)) + 0.5 * (groups == "NonWhite")
    for r in stats.disparity_curve(error, groups):
        print(f"  q={r.q:2.0f}  threshold {r.threshold:5.2f}  White/NonWhite positive-rate ratio {r.ratio:.2f}")

    a = rng.normal(0.90, 0.02, 40)
    for label, b in (("same model", a), ("better model", a + 0.02)):
        res = stats.bootstrap_compare(a, b, rng=1)
        print(f"bootstrap vs {label}: p={res.p_value:.3g} {res.tier}")


if __name__ == "__main__":
    main()
