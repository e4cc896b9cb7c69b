# # Entropic transport between frames and prompts
#
# A few frames of a video and a handful of prompt embeddings live on the unit
# sphere. We build the cosine cost between them, solve the regularised
# transport problem, and look at how the coupling spreads its mass.

import numpy as np

from otprompt import otalign as oa
from otprompt.numerics import l2_normalize_rows, make_rng

rng = make_rng(0)
frames, _ = l2_normalize_rows(rng.normal(size=(6, 4)))
prompts, _ = l2_normalize_rows(rng.normal(size=(3, 4)))
cost = oa.cosine_cost(frames, prompts)
print(np.round(cost.values, 3))

# With uniform marginals every frame ships 1/6 of the mass and every prompt
# receives 1/3.

plan = oa.sinkhorn(cost)
print(np.round(plan.coupling, 4))
print("iterations", plan.iterations_used, "converged", plan.converged, "residual %.2e" % plan.residual)
print("row sums", plan.coupling.sum(1))
print("col sums", plan.coupling.sum(0))

# Shrinking the regulariser sharpens the plan towards a hard matching and
# lowers the transported cost.

for lam in (1.0, 0.1, 0.01):
    p = oa.sinkhorn(cost, cfg=oa.SinkhornConfig(lam=lam, delta=1e-9, max_iters=5000))
    print(f"lam={lam:<5} cost={oa.ot_distance(p, cost):.4f} max entry={p.coupling.max():.4f}")

# The hard alternatives: a one-to-one matching, and the plain all-pairs sum.

pairs, total = oa.hungarian_align(oa.sqeuclidean_cost(frames, prompts))
print("hungarian pairs", pairs, "cost %.4f" % total)
print("all-pairs squared distance %.4f" % oa.euclidean_align(frames, prompts))
