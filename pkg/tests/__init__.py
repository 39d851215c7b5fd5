# Test modules for funkrig
