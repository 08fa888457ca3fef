"""dynmem: a desk-scale dynamic-memory video diffusion toy.

Chunk-causal flow-matching transformer with camera-phase rotary attention,
a position-preserving streaming KV cache, synthetic worlds with known hidden
state, and attention diagnostics.
"""

__version__ = "0.1.0"

VERSION_STRING = f"dynmem-{__version__}"

__all__ = [
    "VERSION_STRING",
    "AttentionConfig",
    "CameraPose",
    "FrameGraph",
    "InterruptionSpec",
    "KvCache",
    "ModelConfig",
    "SyntheticClip",
    "TrainingPlan",
    "WorldConfig",
]


def __getattr__(name):
    # Lazy re-exports keep `import dynmem` light.
    from importlib import import_module

    homes = {
        "AttentionConfig": ".attention",
        "CameraPose": ".geometry",
        "FrameGraph": ".framegraph",
        "InterruptionSpec": ".framegraph",
        "KvCache": ".cache",
        "ModelConfig": ".model",
        "SyntheticClip": ".framegraph",
        "TrainingPlan": ".curriculum",
        "WorldConfig": ".framegraph",
    }
    if name in homes:
        return getattr(import_module(homes[name], __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
