# Run a sweep described in YAML documents on this machine
#
# docs/app.yaml crosses n in {1, 2} with three labels, writes a parameter
# file from docs/params.tpl for each job and runs a shell command against it.
# docs/services.yaml offers the local machine with three slots. The same
# documents work from the command line:
#
#   broker submit --app demos/docs/app.yaml --services demos/docs/services.yaml

import os
import tempfile

from gridbroker import RunConfig, run, status
from gridbroker.interpreters import load_all

here = os.path.join(os.path.dirname(os.path.abspath(__file__)), "docs")
ctx, services, creds = load_all(os.path.join(here, "app.yaml"), os.path.join(here, "services.yaml"))
print("task:", ctx.tasks[0].task_id, "servers:", [s.service_id for s in services])

# ## Run with real processes
#
# The local adapter starts each job as a child process in its own working
# directory, so a short poll interval keeps the demo quick.

work = tempfile.mkdtemp(prefix="demo04-")
cfg = RunConfig(store_dir=f"{work}/store", out_dir=f"{work}/out", poll_interval_s=0.2,
                workroot=f"{work}/jobs")
report = run(ctx, services, creds, cfg, instance_id="docs")
print(report.table())

# ## Look at one result and at the stored instance

out = os.path.join(cfg.out_dir, "jobs", "j5", "a0", "out_2_green.txt")
print(open(out).read())
print(status(cfg.store_dir, "docs"))
