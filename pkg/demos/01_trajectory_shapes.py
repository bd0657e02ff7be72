"""Four ways to bend a line.

Each model describes one subject's mean trajectory with a change point
``theta_cp`` and a transition width ``theta_t``. This script evaluates the
four shapes for the same individual and prints them side by side, so the
differences around the change point are easy to see.
"""

import numpy as np

from cpnlmm.trajectories import ThetaIndividual, mean_fn, p3_coefficients

# a flat start at 11 points, accelerated decline after age-like time 10
th = ThetaIndividual(theta0=11.0, theta1=0.0, theta2=-0.5, theta_cp=10.0, theta_t=3.0)
# the DEM reads theta2 as a decay rate, so it is positive
dem = ThetaIndividual(theta0=11.0, theta1=0.0, theta2=0.5, theta_cp=10.0, theta_t=3.0)

t = np.arange(4.0, 19.0, 1.0)
rows = {
    "bsm": mean_fn("bsm", t, th),
    "bwm": mean_fn("bwm", t, th),
    "bcr": mean_fn("bcr", t, th),
    "dem": mean_fn("dem", t, dem),
}

print("   t " + "".join(f"{m:>9}" for m in rows))
for k, tk in enumerate(t):
    print(f"{tk:4.0f} " + "".join(f"{rows[m][k]:9.3f}" for m in rows))

# The Bacon-Watts form is parameterized around the mean of the two slopes
# (theta1 - theta2 before, theta1 + theta2 after), so the same numbers give
# it a rise-then-fall shape. The broken stick has a kink; the bent cable replaces it with a quadratic
# piece on [cp - T, cp + T]; the DEM switches its decay rate on smoothly
# with a cubic that is flat at both ends.
cub = p3_coefficients(dem)
print("\nDEM rate at cp, cp + T/2, cp + T:",
      [round(float(cub(x)), 4) for x in (10.0, 11.5, 13.0)])
print("slope of the broken stick after cp:", rows["bsm"][-1] - rows["bsm"][-2])
