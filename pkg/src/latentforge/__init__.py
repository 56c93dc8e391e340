""" Text-guided latent optimization toolkit """
