"""Surround-view camera layout shared by the window schemes and the scene generator."""

VIEW_NAMES = ("FL", "F", "FR", "BL", "B", "BR")
# azimuth of each optical axis in degrees; ego x forward, y left, counter-clockwise positive
VIEW_AZIMUTHS = (60.0, 0.0, -60.0, 120.0, 180.0, -120.0)
N_VIEWS = len(VIEW_NAMES)

VIEW = {name: i for i, name in enumerate(VIEW_NAMES)}


def clockwise_neighbor(view: int) -> int:
    """Index of the camera 60 degrees clockwise (seen from above) of ``view``."""
    target = (VIEW_AZIMUTHS[view] - 60.0 + 180.0) % 360.0 - 180.0
    for i, az in enumerate(VIEW_AZIMUTHS):
        if abs(((az - target + 180.0) % 360.0) - 180.0) < 1e-9:
            return i
    raise ValueError(f"no camera clockwise of view {view}")
