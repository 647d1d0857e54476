# Marks the lib directory as a package.
