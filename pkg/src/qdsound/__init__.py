"""Quality-diversity search over evolved synthesizer sounds.

A genome couples a small pattern-producing network (which supplies
control signals) with a graph of DSP units (which shape audio). The
engine mutates genomes, renders them, embeds the audio in a feature
space, projects features to a low-dimensional behaviour space, and
keeps the fittest sound found so far in each behaviour cell.

Submodules: genome, render, features, refdb, projection, fitness,
archive, engine, analysis, cli.
"""

__version__ = "0.1.0"
