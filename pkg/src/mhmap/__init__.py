"""Moving-horizon MAP estimation from binary threshold sensors."""
