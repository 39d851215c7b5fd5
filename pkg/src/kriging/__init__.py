# Kriging core: correlation algebra, fitting, EM completion and analyses
