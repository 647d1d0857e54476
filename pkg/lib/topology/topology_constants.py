import math


class TopologyDefaults:
    # Winding guards
    MAX_STEP = math.pi / 2
    MAX_WINDING_DEVIATION = 0.25

    # Sphere coverage: 12 * 4^2 = 192 equal-area cells
    COVERAGE_NSIDE = 4

    # Reconstruction grids
    RECONSTRUCTION_RESOLUTION = 8
    EUCLIDEAN_EXTENT = 3.0
    ENCODE_BATCH = 512


class PaletteConstants:
    # hue = i / G; saturation alternates with the parity of i + j; value follows cos(2 pi j / G)
    SATURATION_EVEN = 0.9
    SATURATION_ODD = 0.7
    VALUE_BASE = 0.6
    VALUE_SWING = 0.4
