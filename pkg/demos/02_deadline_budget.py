# Deadline and budget constrained scheduling
#
# Two single-slot servers, each taking one minute per job. "pricey" charges
# 2 units per CPU-minute, "thrifty" charges 1. Ten jobs are waiting.

from collections import Counter

from gridbroker import ComputeServer, QoS, expand_task, schedule_tick
from gridbroker.model import Execute, Task, Variable
from gridbroker.scheduler import SchedulerEnv

task = Task("t", (Execute("./sim $i"),), (Variable("i", "integer", 1, 10, 1),))
jobs = expand_task(task)


def server(sid, per_minute):
    # observed_rate is jobs per second; completed=1 marks the rate as measured
    return ComputeServer(sid, adapter="sim", slots=1, price_per_cpu_s=per_minute / 60,
                         observed_rate=1 / 60, completed=1)


servers = [server("pricey", 2), server("thrifty", 1)]


def show(label, res):
    counts = Counter(res.plan.values())
    cost = sum(n * 60 * s.price_per_cpu_s for s in servers for sid, n in counts.items()
               if s.service_id == sid)
    span = max(n * 60 for n in counts.values())
    print(f"{label:34} placement={dict(counts)} cost={cost:.1f} makespan={span}s")


# ## Cheapest plan that meets a 10-minute deadline
#
# Everything fits on the cheap server in time, so nothing goes to "pricey".

env = SchedulerEnv(tasks={"t": task}, deadline_left=600)
show("cost_dbc, deadline 600s", schedule_tick(jobs, servers, "cost_dbc", QoS(deadline_s=600), 0, env))

# ## Tighter deadline
#
# With 6 minutes the cheap server alone is too slow; the overflow pays more.

env = SchedulerEnv(tasks={"t": task}, deadline_left=360)
show("cost_dbc, deadline 360s", schedule_tick(jobs, servers, "cost_dbc", QoS(deadline_s=360), 0, env))

# ## Fastest plan within a budget of 20
#
# Splitting 5/5 costs 15 and finishes in 5 minutes.

env = SchedulerEnv(tasks={"t": task}, budget_left=20)
show("time_dbc, budget 20", schedule_tick(jobs, servers, "time_dbc", QoS(budget=20), 0, env))

# ## Budget too small for everything
#
# Jobs the budget cannot cover are reported instead of being placed.

env = SchedulerEnv(tasks={"t": task}, budget_left=6)
res = schedule_tick(jobs, servers, "time_dbc", QoS(budget=6), 0, env)
show("time_dbc, budget 6", res)
print("not placed:", res.infeasible[:2], "...")
