"""
Synthetic two-view phantoms
===========================

Each case has a four-chamber image and a three-vessel image. Abnormal
cases may lose one structure, which is what makes labels go missing.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from echoseg.dataset import TAXONOMY, presence
from echoseg.synthgen import PhantomSpec, generate_arrays
from echoseg.trainer import overlay

spec = PhantomSpec(image_size=128, n_cases=3, abnormal_fraction=1.0, drop_probability=1.0, seed=7)
cases = list(generate_arrays(spec))

fig, axes = plt.subplots(2, len(cases), figsize=(3 * len(cases), 6))
for ax, (case, view, normality, image, labels) in zip(axes.T.ravel(), cases):
    ax.imshow(overlay(image, labels))
    ax.set_title(f"{case} {view} ({normality})", fontsize=8)
    ax.axis("off")
    found = np.flatnonzero(presence(labels)) + 1
    missing = sorted(set(TAXONOMY.labels_for_view(view)) - set(found))
    print(case, view, "missing:", [TAXONOMY.name(l) for l in missing])
fig.tight_layout()
fig.savefig("phantoms.png", dpi=100)
print("wrote phantoms.png")
