"""splatflight: quadrotor flight simulation against Gaussian-splat scenes.

Modules:
    geom      -- quaternions, rigid transforms, pinhole camera
    dynamics  -- 10-state drone model + RK4 integration
    splat     -- scene representation, PLY I/O, tiled rasterizer
    flatness  -- minimum-snap trajectories and flatness inversion
    expert    -- receding-horizon tracking controller
    datagen   -- randomized demonstration-dataset synthesis
    analysis  -- tracking/collision metrics and thrust-gain adaptation
    config    -- TOML/JSON run configuration
    cli       -- batch command-line front end
"""

__version__ = "0.1.0"
