# A first parameter sweep on the simulated grid
#
# The sim adapter runs jobs on a virtual clock, so a sweep of 30-second
# jobs finishes instantly while the report still shows grid-scale timings.

import tempfile

from gridbroker import ApplicationContext, ComputeServer, QoS, RunConfig, Task, expand_task, run
from gridbroker.model import Execute, Variable

# ## Describe the sweep
#
# One task, two variables. Expansion is the cross product, so 4 x 3 = 12 jobs.

task = Task(
    "render",
    (Execute("./render --frame $frame --quality $q"),),
    (Variable("frame", "integer", 1, 4, 1), Variable("q", "string", values=("low", "mid", "high"))),
    ("frame_${frame}_${q}.png",),
)
jobs = expand_task(task)
print(len(jobs), "jobs")
for j in jobs[:4]:
    print(" ", j.job_id, j.bindings)

# ## Two simulated servers

servers = [
    ComputeServer("alpha", "sim://alpha", adapter="sim", slots=4),
    ComputeServer("beta", "sim://beta", adapter="sim", slots=2),
]

# ## Run it

ctx = ApplicationContext("render", "render", QoS(), (), (task,))
work = tempfile.mkdtemp(prefix="demo01-")
report = run(ctx, servers, [], RunConfig(store_dir=f"{work}/store", out_dir=f"{work}/out"))
print(report.table())
print("per-server:", {s: sum(1 for j in report.jobs if j.server == s) for s in ("alpha", "beta")})
