"""Runtime voltage control over PMBus: codec, bus engine, regulator model,
opcode controller, settling analysis and undervolting sweep harness."""

__version__ = "0.1.0"
