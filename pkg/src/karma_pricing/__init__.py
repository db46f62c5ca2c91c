"""Data-driven Karma toll pricing for parallel-arc routing games."""
import jax

# moment matching and its gradients need double precision
jax.config.update("jax_enable_x64", True)
