# Services that orchestrate the kriging pipeline for the command line
