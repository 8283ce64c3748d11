"""Pseudonymous peer-assisted location-based service queries.

Subpackages and modules:

* :mod:`peerlbs.crypto` - signature schemes and the simulated cost model
* :mod:`peerlbs.credentials` - LTCA, PCA and RA
* :mod:`peerlbs.node` - the mobile client
* :mod:`peerlbs.netsim` - discrete-event radio simulation and workload
* :mod:`peerlbs.lbs` - honest-but-curious LBS server
* :mod:`peerlbs.adversary` - misbehaving nodes and the evidence judge
* :mod:`peerlbs.harness` - scenarios, metrics, reports and the CLI
"""

__version__ = "0.1.0"
