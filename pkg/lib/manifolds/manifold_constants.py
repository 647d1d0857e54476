class ManifoldDefaults:
    # Radii
    SPHERE_RADIUS = 1.0
    MAJOR_RADIUS = 1.0
    MINOR_RADIUS = 0.5

    # Tolerances
    SINGULAR_THRESHOLD = 1e-9
    ON_MANIFOLD_TOLERANCE = 1e-6
    NUDGE = 1e-6

    # Accepted manifold names -> (kind, intrinsic dimension)
    NAME_TABLE = {
        "circle": ("sphere", 1),
        "sphere1": ("sphere", 1),
        "sphere2": ("sphere", 2),
        "sphere3": ("sphere", 3),
        "flat-torus": ("flat_torus", 2),
        "embedded-torus": ("embedded_torus", 2),
        "projective2": ("projective", 2),
        "projective3": ("projective", 3),
        "rp2": ("projective", 2),
        "rp3": ("projective", 3),
        "euclidean2": ("euclidean", 2),
        "euclidean3": ("euclidean", 3),
        "r2": ("euclidean", 2),
        "r3": ("euclidean", 3),
    }
