"""arenasim: a closed-loop driving simulation arena.

Modules:

* :mod:`arenasim.roadnet` - OSM parsing, lane graph and routing
* :mod:`arenasim.traffic` - background traffic engine and world stepping
* :mod:`arenasim.layout` - camera rig, layout canvases and renderer conditions
* :mod:`arenasim.dreamer` - renderer protocol and the built-in synthetic renderer
* :mod:`arenasim.agent` - driving-agent protocol and reference agents
* :mod:`arenasim.metrics` - PDMS, route completion and ADS
* :mod:`arenasim.orchestrator` - episode loop, logs, replay and HTTP service
* :mod:`arenasim.cli` - command line entry point
"""

__version__ = "0.1.0"
