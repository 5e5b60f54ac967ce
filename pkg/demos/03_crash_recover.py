# Crash the broker mid-run and recover it
#
# fail_after_writes makes the store raise after N durable writes, which is
# as close to pulling the plug as a test can get. The simulated grid keeps
# its own state on disk, so it survives the "crash" the way a real cluster
# would. After recovery every job must have executed exactly once.

import dataclasses
import random
import tempfile

from gridbroker import ApplicationContext, Broker, ComputeServer, QoS, RunConfig, Task, open_store
from gridbroker.errors import SimulatedCrash
from gridbroker.execution.sim import SimConfig, SimGrid
from gridbroker.model import Execute, Variable

work = tempfile.mkdtemp(prefix="demo03-")
sim_state = f"{work}/grid.json"
task = Task("t", (Execute("./app $i"),), (Variable("i", "integer", 1, 40, 1),), ("out_$i.txt",))
ctx = ApplicationContext("crashy", "crashy", QoS(), (), (task,))
servers = [ComputeServer("s1", "sim://s1", adapter="sim", slots=8),
           ComputeServer("s2", "sim://s2", adapter="sim", slots=4)]
cfg = RunConfig(store_dir=f"{work}/store", out_dir=f"{work}/out", sync=False)


def grid():
    return SimGrid(SimConfig(), state_path=sim_state)


# ## Kill it five times

rng = random.Random(7)
first = True
for kill in range(5):
    b = Broker(dataclasses.replace(cfg, fail_after_writes=rng.randint(5, 60)), sim=grid())
    try:
        if first:
            b.submit(ctx, servers, [], instance_id="run")
        else:
            b.recover("run", [])
    except SimulatedCrash:
        pass
    first = False
    ro = open_store(cfg.store_dir, "run", read_only=True)
    states = {}
    for j in ro.iter_jobs():
        states[j.state.value] = states.get(j.state.value, 0) + 1
    ro.close()
    print(f"after kill {kill + 1}: {states}")

# ## Recover without interference

report = Broker(cfg, sim=grid()).recover("run", [])
print(f"{report.done} done, {report.failed} failed, {report.recovered} recovered on the last pass")

executions = grid().executions
print("jobs executed:", len(executions), "max executions of any job:", max(executions.values()))
