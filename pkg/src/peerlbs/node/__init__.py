from .cache import NodeCache, PoiRecord, PopularityTracker, combine
from .messages import Frame, LinkIdentity, PeerQuery, PeerResponse
from .node import Need, Node, NodeParams, ProtocolFault, PseudonymCache, QuotaLedger, contradicting

__all__ = [
    "Frame",
    "LinkIdentity",
    "Need",
    "Node",
    "NodeCache",
    "NodeParams",
    "PeerQuery",
    "PeerResponse",
    "PoiRecord",
    "PopularityTracker",
    "ProtocolFault",
    "PseudonymCache",
    "QuotaLedger",
    "combine",
    "contradicting",
]
