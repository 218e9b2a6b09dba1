"""
Oat - object-agent-centric visual tokenization for action-token policies.
"""

__version__ = "0.3.0"
