"""Moving-horizon state estimation for power networks and synchronous generators."""
