"""Graph-filter / graph-network hybrid controller with decentralized
online retraining, exercised on a robot-swarm flocking testbed."""

__version__ = "0.1.0"
