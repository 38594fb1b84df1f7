"""Placeholder; filled in after the network and training modules."""
