"""Link-weight optimization for OSPF/ECMP networks with a link-agent GNN policy."""

from .baselines import default_ospf_weights, local_search_weights
from .routing import ecmp_loads, max_utilization
from .topology import Topology, TrafficMatrix, load_fixture, parse_topology, parse_traffic

__version__ = "0.1.0"

__all__ = [
    "Topology",
    "TrafficMatrix",
    "default_ospf_weights",
    "ecmp_loads",
    "load_fixture",
    "local_search_weights",
    "max_utilization",
    "parse_topology",
    "parse_traffic",
]
