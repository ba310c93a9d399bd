"""Link-level road traffic resilience to extreme weather from crowdsourced data."""
__version__ = "0.1.0"
