class NetDefaults:
    # Architecture
    HIDDEN_WIDTH = 256
    ENCODER_HIDDEN_LAYERS = 3
    DECODER_HIDDEN_LAYERS = 2
    HIDDEN_ACTIVATION = "relu"
    ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")

    # Adam
    LEARNING_RATE = 1e-3
    BETA1 = 0.9
    BETA2 = 0.999
    ADAM_EPSILON = 1e-8

    # Checkpoint file
    CHECKPOINT_MAGIC = b"DVAE-CKPT"
    CHECKPOINT_VERSION = 1
