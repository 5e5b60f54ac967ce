# Choosing where to fetch an input file from
#
# A 500 MB dataset is replicated on three data hosts. Time mode picks the
# replica behind the fastest link; economy mode picks the cheapest one and
# only uses transfer time to break ties.

from gridbroker import Job, NetworkLink, select_data_hosts
from gridbroker.catalog import Replica
from gridbroker.model import LinkTable

size = 500 * 10**6
replicas = {"climate.nc": [Replica("campus", "/data/climate.nc", size),
                           Replica("cloud", "/bucket/climate.nc", size),
                           Replica("archive", "/tape/climate.nc", size)]}
links = LinkTable([NetworkLink("broker", "campus", 100.0, cost_per_mb=0.0),
                   NetworkLink("broker", "cloud", 1000.0, cost_per_mb=0.002),
                   NetworkLink("broker", "archive", 20.0, cost_per_mb=0.0)])
prices = {"campus": 0.001, "cloud": 0.004, "archive": 0.0}

job = Job("j1", "t")
for economy in (False, True):
    pick = select_data_hosts(job, replicas, links, economy, prices=prices)["climate.nc"]
    print("economy" if economy else "time   ", "->", pick)

# ## Measured bandwidth overrides the nominal figure
#
# If the cloud link turns out to deliver only 10 Mbps, time mode moves away.

links = LinkTable([NetworkLink("broker", "campus", 100.0),
                   NetworkLink("broker", "cloud", 1000.0, measured_mbps=10.0),
                   NetworkLink("broker", "archive", 20.0)])
print("time, slow cloud ->", select_data_hosts(job, replicas, links)["climate.nc"])
