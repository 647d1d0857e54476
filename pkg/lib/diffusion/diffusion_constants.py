class DiffusionDefaults:
    # Random walk
    WALK_STEPS = 16
    MAX_RESAMPLES = 100

    # Diffusion-time bounds used for training
    T_MIN = 1e-4
    T_MAX = 4e-3

    # Largest time the validation commands use
    VALIDATION_MAX_TIME = 1.0

    # Kernel series and quadrature
    TAIL_TOLERANCE = 1e-12
    PARAMETRIX_MAX_TIME = 0.05
    ANTIPODE_MARGIN = 1e-6
    SMALL_ANGLE = 1e-3
    CIRCLE_GRID = 4096
    SPHERE_PANELS = 400
    GAUSS_NODES = 16
    SPHERE_METHODS = ("auto", "parametrix", "spectral")

    # Numeric KL interpolation table
    KL_TABLE_POINTS = 33
