"""
Cosine annealing with warm restarts
===================================

Three cycles fit in 200 epochs: 50, 65.5 and 85.8 epochs long.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from echoseg.optimsched import ScheduleConfig, cycle_starts, lr_at

cfg = ScheduleConfig()
t = np.linspace(0, cfg.total_epochs, 2001)[:-1]
plt.plot(t, [lr_at(x, cfg) for x in t])
for start in cycle_starts(cfg):
    plt.axvline(start, color="gray", lw=0.5)
plt.xlabel("epoch")
plt.ylabel("learning rate")
plt.savefig("schedule.png", dpi=100)
print("restarts at", cycle_starts(cfg))
