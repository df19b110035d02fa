"""Desk-scale character free-viewpoint rendering.

Three stages: skeleton-driven deformable posing (embedded graph + dual
quaternion skinning), depth-tested projective texturing with multi-view
fusion, and a small differentiable refinement/super-resolution stack.  A CLI
(`holochar`) and an HTTP/WebSocket render service sit on top.
"""

__version__ = "0.1.0"
