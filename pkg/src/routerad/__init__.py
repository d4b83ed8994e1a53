"""Anomaly-based malware detection for home routers from syscall and flow windows."""
__version__ = "0.1.0"
