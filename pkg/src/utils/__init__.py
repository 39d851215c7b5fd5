# Shared utilities: errors, logging, file formats
