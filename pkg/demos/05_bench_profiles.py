# Overhead of the broker for three synthetic job profiles
#
# simple: 30 s jobs with almost no I/O. data: 300 s jobs that each pull a
# 100 MB input over a 10 Mbps link. compute: 600 s jobs with no I/O.
# On the simulated grid the numbers are virtual seconds and fully repeatable.

import tempfile

from gridbroker import bench

for name in ("simple", "data", "compute"):
    res = bench(name, 20, seed=1, workdir=tempfile.mkdtemp(prefix=f"demo05-{name}-"))
    print(res.table())

# ## The same profile with real processes
#
# time_scale shrinks job lengths so the local run takes about a second.

res = bench("simple", 5, adapter="local", time_scale=0.01,
            workdir=tempfile.mkdtemp(prefix="demo05-local-"))
print(res.table())
